use std::fs;
use std::path::{Path, PathBuf};

use anatbias_core::bias::make_layer_bias;
use anatbias_core::decoder::{load_checkpoint, save_checkpoint};
use anatbias_core::formats::{
    bias_matrix_csv, encode_pgm, layer_to_image, mask_stack_csv, mask_to_image, read_mask_pgm, write_atomic,
    BiasDumpHeader,
};
use anatbias_core::harness::{
    make_dataset, plan_for, run_ablation, sample_instance, to_examples, train_single, Split, EOS,
};
use anatbias_core::mask::{build_mask_stack, fuse_masks, MASK_GRID_SIDE};
use anatbias_core::{BiasMode, BiasPlan, BinaryMask, CausalMask, Error, ExperimentConfig, Result};

use crate::Common;

/// Defaults, then the config file, then flags.
fn resolve(common: &Common, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(mode) = common.mode {
        cfg.modes = vec![mode];
    }
    if let Some(layers) = common.layers {
        cfg.decoder.n_layers = layers;
    }
    if let Some(k) = common.k_base {
        cfg.k_base = k;
    }
    if let Some(k) = common.k_incr {
        cfg.k_incr = k;
    }
    if common.no_normalize {
        cfg.normalize = false;
    }
    if let Some(scale) = common.scale {
        cfg.scale = scale;
    }
    Ok(cfg)
}

/// Mask tools default to the 12-layer ladder; training defaults to the toy decoder.
fn mask_tool_config(common: &Common) -> Result<ExperimentConfig> {
    let mut base = ExperimentConfig::default();
    base.decoder.n_layers = 12;
    base.modes = vec![BiasMode::Mask];
    resolve(common, base)
}

/// The single mode a command acts on: the only configured one, else Mask.
fn single_mode(cfg: &ExperimentConfig) -> BiasMode {
    match cfg.modes.as_slice() {
        [only] => *only,
        _ => BiasMode::Mask,
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn read_fused(lung: &Path, heart: &Path) -> Result<BinaryMask> {
    let lung = read_mask_pgm(lung, MASK_GRID_SIDE)?;
    let heart = read_mask_pgm(heart, MASK_GRID_SIDE)?;
    fuse_masks(&lung, &heart)
}

pub fn smooth(lung: &Path, heart: &Path, common: &Common) -> Result<()> {
    let cfg = mask_tool_config(common)?;
    let schedule = cfg.schedule()?;
    let fused = read_fused(lung, heart)?;
    let stack = build_mask_stack(&fused, &schedule, cfg.normalize)?;
    let dir = out_dir(common)?;
    write_atomic(&dir.join("fused.pgm"), &encode_pgm(&mask_to_image(&fused)))?;
    for (l, layer) in stack.layers().iter().enumerate() {
        let path = dir.join(format!("layer_{:02}.pgm", l + 1));
        write_atomic(&path, &encode_pgm(&layer_to_image(layer)))?;
    }
    write_atomic(&dir.join("layers.csv"), mask_stack_csv(&stack).as_bytes())?;
    println!(
        "{} layers, kernels {:?}, written to {}",
        stack.n_layers(),
        schedule.kernel_sizes(),
        dir.display()
    );
    Ok(())
}

pub fn bias(lung: &Path, heart: &Path, layer: usize, t_rep: usize, total_len: usize, common: &Common) -> Result<()> {
    let cfg = mask_tool_config(common)?;
    let schedule = cfg.schedule()?;
    let fused = read_fused(lung, heart)?;
    let stack = build_mask_stack(&fused, &schedule, cfg.normalize)?;
    let mode = single_mode(&cfg);
    let plan = BiasPlan::for_mode(mode, &fused, &stack, cfg.scale)?;
    let causal = CausalMask::causal(t_rep, total_len)?;
    let matrix = make_layer_bias(&plan, layer, &causal)?;
    let header = BiasDumpHeader {
        mode,
        layer,
        t_rep,
        total_len,
        scale: cfg.scale,
    };
    let dir = out_dir(common)?;
    let path = dir.join("bias.csv");
    write_atomic(&path, bias_matrix_csv(&header, &matrix).as_bytes())?;
    println!(
        "{}x{} {mode} bias for layer {layer} written to {}",
        t_rep,
        total_len,
        path.display()
    );
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = resolve(common, ExperimentConfig::default())?;
    cfg.validate()?;
    let mode = single_mode(&cfg);
    let seed = cfg.seeds[0];
    let data = to_examples(&cfg, &make_dataset(&cfg, seed, Split::Train, cfg.n_train)?, mode)?;
    let run = train_single(&cfg, mode, seed, &data)?;
    let dir = out_dir(common)?;
    save_checkpoint(&run.model, &dir.join("model.ckpt"))?;
    let mut curve = String::from("step,lr,loss\n");
    for r in &run.records {
        curve.push_str(&format!("{},{:e},{:.6}\n", r.step, r.lr, r.loss));
    }
    write_atomic(&dir.join("loss_curve.csv"), curve.as_bytes())?;
    let last = run
        .records
        .last()
        .map_or("n/a".to_string(), |r| format!("{:.4}", r.loss));
    println!(
        "{mode} seed {seed}: {} steps, final loss {last}, checkpoint {}",
        run.records.len(),
        dir.join("model.ckpt").display()
    );
    Ok(())
}

pub fn generate(checkpoint: &Path, instance: u64, max_new: Option<usize>, common: &Common) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let mut cfg = resolve(common, ExperimentConfig::default())?;
    if common.layers.is_some_and(|l| l != model.config().n_layers) {
        return Err(Error::InvalidArgument(format!(
            "--layers does not match the checkpoint's {} layers",
            model.config().n_layers
        )));
    }
    cfg.decoder = model.config().clone();
    cfg.validate()?;
    let inst = sample_instance(&cfg, instance)?;
    let plan = plan_for(&cfg, &inst, single_mode(&cfg))?;
    let prefix = model.embed_patches(&inst.patches())?;
    let out = model.generate(&prefix, Some(&plan), max_new.unwrap_or(cfg.max_new), EOS)?;
    let render = |tokens: &[usize]| tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    println!("{}", render(&out.tokens));
    eprintln!("target: {}  ({:?})", render(&inst.target), out.status);
    Ok(())
}

pub fn compare(common: &Common) -> Result<()> {
    let cfg = resolve(common, ExperimentConfig::default())?;
    let report = run_ablation(&cfg, |r| {
        eprintln!(
            "{} seed {}: region accuracy {:.4} ({:.1}s)",
            r.mode, r.seed, r.metrics.region_token_accuracy, r.runtime_secs
        )
    })?;
    let dir = out_dir(common)?;
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&dir.join("summary.csv"), report.summary_csv().as_bytes())?;
    print!("{}", report.table());
    Ok(())
}
