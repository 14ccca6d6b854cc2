//! Synthetic task, metrics and the three-way ablation runner.

mod ablation;
mod config;
mod metrics;
mod synth;

pub use ablation::{
    evaluate, instance_seed, make_dataset, plan_for, run_ablation, run_train_config, sample_instance, to_examples,
    train_single, EvalMetrics, ExperimentReport, ModeSummary, RunResult, Split, TrainedRun,
};
pub use config::ExperimentConfig;
pub use metrics::{region_token_accuracy, token_accuracy};
pub use synth::{
    finding_token, is_finding_token, synth_instance, target_from_blobs, Blob, SyntheticInstance, EOS, N_FINDING_KINDS,
    PATCH, VOCAB_SIZE,
};
