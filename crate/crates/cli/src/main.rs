use std::path::PathBuf;
use std::process::ExitCode;

use anatbias_core::{BiasMode, Error};
use clap::{Args, Parser, Subcommand};

mod commands;

/// Layer-wise anatomical attention bias: mask smoothing, bias dumps, and a
/// toy decoder with a three-way ablation.
#[derive(Parser, Debug)]
#[command(name = "anatbias", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse lung and heart masks and write one smoothed layer per decoder layer.
    Smooth {
        #[arg(long)]
        lung: PathBuf,
        #[arg(long)]
        heart: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the bias matrix of one layer as CSV.
    Bias {
        #[arg(long)]
        lung: PathBuf,
        #[arg(long)]
        heart: PathBuf,
        /// 1-based decoder layer.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Number of query rows (the last `t_rep` positions).
        #[arg(long, default_value_t = 4)]
        t_rep: usize,
        /// Total sequence length, i.e. number of key columns.
        #[arg(long, default_value_t = 1028)]
        total_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy decoder on synthetic data; writes a checkpoint and loss curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy generation for one synthetic instance with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the synthetic instance to describe.
        #[arg(long, default_value_t = 0)]
        instance: u64,
        #[arg(long)]
        max_new: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the NoMask / Mask / HiddenMask ablation and print the summary table.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every subcommand. Each maps onto a config-file key and
/// overrides it.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<BiasMode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of decoder layers (and smoothed mask layers).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    k_base: Option<usize>,
    #[arg(long)]
    k_incr: Option<usize>,
    /// Skip the per-layer max rescale of smoothed masks.
    #[arg(long)]
    no_normalize: bool,
    /// Multiplier on the smoothed mask before it is added to the logits.
    #[arg(long, allow_negative_numbers = true)]
    scale: Option<f64>,
}

fn parse_mode(s: &str) -> Result<BiasMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Shape(_) | Error::FullyMaskedRow { .. } | Error::NonFinite(_) | Error::ContextOverflow { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Smooth { lung, heart, common } => commands::smooth(&lung, &heart, &common),
        Command::Bias {
            lung,
            heart,
            layer,
            t_rep,
            total_len,
            common,
        } => commands::bias(&lung, &heart, layer, t_rep, total_len, &common),
        Command::Train { common } => commands::train(&common),
        Command::Generate {
            checkpoint,
            instance,
            max_new,
            common,
        } => commands::generate(&checkpoint, instance, max_new, &common),
        Command::Compare { common } => commands::compare(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
