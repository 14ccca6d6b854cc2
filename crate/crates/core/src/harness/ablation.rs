//! The three-way ablation: for each (mode, seed) train the decoder from a
//! seed-determined initialisation on the same synthetic data, then score
//! greedy generations on held-out instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::metrics::{region_token_accuracy, token_accuracy};
use super::synth::{synth_instance, SyntheticInstance, EOS};
use crate::bias::{BiasMode, BiasPlan};
use crate::decoder::{train, DecoderModel, StepRecord, TrainConfig, TrainExample};
use crate::error::{Error, Result};
use crate::formats::fmt_value;
use crate::mask::build_mask_stack;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Seed of instance `index` in `split` for run seed `seed` (splitmix64 mix).
pub fn instance_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7452_4149_4e00_0000u64,
        Split::Eval => 0x4556_414c_0000_0000u64,
    };
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` instances with 1..=max_findings findings and 1..=max_distractors distractors.
pub fn make_dataset(cfg: &ExperimentConfig, seed: u64, split: Split, n: usize) -> Result<Vec<SyntheticInstance>> {
    (0..n)
        .map(|i| sample_instance(cfg, instance_seed(seed, split, i)))
        .collect()
}

/// One instance whose finding and distractor counts are drawn from `seed` as well.
pub fn sample_instance(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = rng.random_range(1..=cfg.max_findings);
    let nd = rng.random_range(1..=cfg.max_distractors);
    synth_instance(seed, cfg.grid(), nf, nd)
}

/// Bias plan of an instance under `mode`.
pub fn plan_for(cfg: &ExperimentConfig, inst: &SyntheticInstance, mode: BiasMode) -> Result<BiasPlan> {
    let fused = inst.fused_mask();
    match mode {
        BiasMode::NoMask => Ok(BiasPlan::no_mask(cfg.decoder.visual_len)),
        BiasMode::HiddenMask => BiasPlan::hidden(&fused, cfg.decoder.n_layers),
        BiasMode::Mask => {
            let stack = build_mask_stack(&fused, &cfg.schedule()?, cfg.normalize)?;
            BiasPlan::mask(&stack, cfg.scale)
        }
    }
}

pub fn to_examples(cfg: &ExperimentConfig, data: &[SyntheticInstance], mode: BiasMode) -> Result<Vec<TrainExample>> {
    data.iter()
        .map(|inst| {
            Ok(TrainExample {
                patches: inst.patches(),
                target: inst.target.clone(),
                plan: Some(plan_for(cfg, inst, mode)?),
            })
        })
        .collect()
}

/// Train config of one run: the shared recipe with the run seed.
pub fn run_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub eval_loss: f64,
    pub token_accuracy: f64,
    pub region_token_accuracy: f64,
}

pub fn evaluate(model: &DecoderModel, cfg: &ExperimentConfig, eval: &[TrainExample]) -> Result<EvalMetrics> {
    let items: Vec<_> = eval.iter().map(TrainExample::as_item).collect();
    let eval_loss = model.batch_loss(&items)?;
    let (mut tok, mut region) = (0.0, 0.0);
    for ex in eval {
        let prefix = model.embed_patches(&ex.patches)?;
        let generation = model.generate(&prefix, ex.plan.as_ref(), cfg.max_new, EOS)?;
        tok += token_accuracy(&generation.tokens, &ex.target);
        region += region_token_accuracy(&generation.tokens, &ex.target);
    }
    let n = eval.len().max(1) as f64;
    Ok(EvalMetrics {
        eval_loss,
        token_accuracy: tok / n,
        region_token_accuracy: region / n,
    })
}

/// Result of one (mode, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: BiasMode,
    pub seed: u64,
    pub init_checksum: String,
    pub final_checksum: String,
    pub final_loss: f64,
    pub metrics: EvalMetrics,
    pub runtime_secs: f64,
}

/// Output of a single training run, shared by the ablation and the command line.
pub struct TrainedRun {
    pub model: DecoderModel,
    pub init_checksum: String,
    pub records: Vec<StepRecord>,
}

pub fn train_single(cfg: &ExperimentConfig, mode: BiasMode, seed: u64, data: &[TrainExample]) -> Result<TrainedRun> {
    let mut model = DecoderModel::new(cfg.decoder.clone(), seed)?;
    let init_checksum = model.weights().checksum();
    let records = train(&mut model, data, &run_train_config(cfg, seed), |_| {})?;
    if let Some(bad) = records.iter().find(|r| !r.loss.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{mode} seed {seed}: training loss at step {}",
            bad.step
        )));
    }
    Ok(TrainedRun {
        model,
        init_checksum,
        records,
    })
}

fn run_one(cfg: &ExperimentConfig, mode: BiasMode, seed: u64) -> Result<RunResult> {
    let started = Instant::now();
    let train_set = to_examples(cfg, &make_dataset(cfg, seed, Split::Train, cfg.n_train)?, mode)?;
    let eval_set = to_examples(cfg, &make_dataset(cfg, seed, Split::Eval, cfg.n_eval)?, mode)?;
    let run = train_single(cfg, mode, seed, &train_set)?;
    let metrics = evaluate(&run.model, cfg, &eval_set)?;
    Ok(RunResult {
        mode,
        seed,
        init_checksum: run.init_checksum,
        final_checksum: run.model.weights().checksum(),
        final_loss: run.records.last().map_or(f64::NAN, |r| r.loss),
        metrics,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: BiasMode,
    pub final_loss: f64,
    pub eval_loss: f64,
    pub token_accuracy: f64,
    pub region_token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    /// Mode-major, seeds in configured order.
    pub rows: Vec<RunResult>,
}

impl ExperimentReport {
    /// Per-mode means over seeds, in first-appearance order.
    pub fn summary(&self) -> Vec<ModeSummary> {
        let mut modes: Vec<BiasMode> = Vec::new();
        for r in &self.rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let rows: Vec<&RunResult> = self.rows.iter().filter(|r| r.mode == mode).collect();
                let mean = |f: &dyn Fn(&RunResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
                ModeSummary {
                    mode,
                    final_loss: mean(&|r| r.final_loss),
                    eval_loss: mean(&|r| r.metrics.eval_loss),
                    token_accuracy: mean(&|r| r.metrics.token_accuracy),
                    region_token_accuracy: mean(&|r| r.metrics.region_token_accuracy),
                }
            })
            .collect()
    }

    pub fn mean_region_accuracy(&self, mode: BiasMode) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.mode == mode)
            .map(|s| s.region_token_accuracy)
    }

    /// Per-run CSV. Wall time is left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,seed,init_checksum,final_checksum,final_loss,eval_loss,token_accuracy,region_token_accuracy\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.mode,
                r.seed,
                r.init_checksum,
                r.final_checksum,
                fmt_value(r.final_loss),
                fmt_value(r.metrics.eval_loss),
                fmt_value(r.metrics.token_accuracy),
                fmt_value(r.metrics.region_token_accuracy)
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,final_loss,eval_loss,token_accuracy,region_token_accuracy\n");
        for s in self.summary() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.mode,
                fmt_value(s.final_loss),
                fmt_value(s.eval_loss),
                fmt_value(s.token_accuracy),
                fmt_value(s.region_token_accuracy)
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("mode,seed,runtime_s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.3}\n", r.mode, r.seed, r.runtime_secs));
        }
        out
    }

    /// Aligned text table of the per-mode means.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>10} {:>10} {:>10} {:>10}\n",
            "mode", "train_loss", "eval_loss", "token_acc", "region_acc"
        );
        for s in self.summary() {
            out.push_str(&format!(
                "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                s.mode.as_str(),
                s.final_loss,
                s.eval_loss,
                s.token_accuracy,
                s.region_token_accuracy
            ));
        }
        out
    }
}

/// Runs every (mode, seed) pair, on `cfg.workers` threads when above one.
/// `on_done` is called from the calling thread as runs finish, in job order.
pub fn run_ablation(cfg: &ExperimentConfig, mut on_done: impl FnMut(&RunResult)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(BiasMode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let workers = cfg.workers.clamp(1, jobs.len());
    let mut rows = Vec::with_capacity(jobs.len());
    if workers == 1 {
        for &(mode, seed) in &jobs {
            let r = run_one(cfg, mode, seed)?;
            on_done(&r);
            rows.push(r);
        }
    } else {
        let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    scope.spawn(move || {
                        jobs.iter()
                            .enumerate()
                            .filter(|(i, _)| i % workers == w)
                            .map(|(i, &(mode, seed))| (i, run_one(cfg, mode, seed)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut all: Vec<(usize, Result<RunResult>)> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("ablation worker panicked"))
                .collect();
            all.sort_by_key(|(i, _)| *i);
            all.into_iter().map(|(_, r)| r).collect()
        });
        for r in results {
            let r = r?;
            on_done(&r);
            rows.push(r);
        }
    }
    Ok(ExperimentReport { rows })
}
