//! Experiment configuration and its flat `key = value` file format.
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::path::Path;

use super::synth::{PATCH, VOCAB_SIZE};
use crate::bias::BiasMode;
use crate::decoder::{DecoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::mask::SmoothingSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub modes: Vec<BiasMode>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_eval: usize,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub k_base: usize,
    pub k_incr: usize,
    pub normalize: bool,
    pub scale: f64,
    /// Findings per instance are drawn from `1..=max_findings`.
    pub max_findings: usize,
    /// Distractors per instance are drawn from `1..=max_distractors`.
    pub max_distractors: usize,
    pub max_new: usize,
    /// Threads for independent (mode, seed) runs.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale ablation: all three modes, three seeds, 2000 updates each
    /// on the toy decoder.
    fn default() -> Self {
        ExperimentConfig {
            modes: BiasMode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            n_train: 1024,
            n_eval: 128,
            decoder: DecoderConfig::toy(VOCAB_SIZE),
            train: TrainConfig {
                base_lr: 5e-4,
                batch_size: 2,
                total_steps: Some(2000),
                ..TrainConfig::default()
            },
            k_base: 3,
            k_incr: 2,
            normalize: true,
            scale: 1.0,
            max_findings: 3,
            max_distractors: 3,
            max_new: 8,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn schedule(&self) -> Result<SmoothingSchedule> {
        SmoothingSchedule::new(self.decoder.n_layers, self.k_base, self.k_incr)
    }

    pub fn grid(&self) -> usize {
        self.decoder.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::invalid("at least one mode is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::invalid("n_train and n_eval must be positive"));
        }
        if self.max_findings == 0 || self.max_distractors == 0 {
            return Err(Error::invalid("max_findings and max_distractors must be positive"));
        }
        if self.decoder.vocab_size != VOCAB_SIZE {
            return Err(Error::invalid(format!(
                "the synthetic task has a vocabulary of {VOCAB_SIZE}, config says {}",
                self.decoder.vocab_size
            )));
        }
        if self.decoder.patch_dim != PATCH * PATCH {
            return Err(Error::invalid(format!("patch_dim must be {}", PATCH * PATCH)));
        }
        if !self.scale.is_finite() {
            return Err(Error::invalid("scale must be finite"));
        }
        self.decoder.validate()?;
        self.train.validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Overlays the keys of a config file onto `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key=value", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::format("config", format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Sets one key. Every command-line flag maps onto one of these keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "modes" | "mode" => {
                self.modes = value.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?;
            }
            "seeds" => {
                self.seeds = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
            }
            "seed" => {
                let s = num(key, value)?;
                self.seeds = vec![s];
                self.train.seed = s;
            }
            "n_train" => self.n_train = num(key, value)?,
            "n_eval" => self.n_eval = num(key, value)?,
            "k_base" => self.k_base = num(key, value)?,
            "k_incr" => self.k_incr = num(key, value)?,
            "layers" => self.decoder.n_layers = num(key, value)?,
            "normalize" => self.normalize = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "max_findings" => self.max_findings = num(key, value)?,
            "max_distractors" => self.max_distractors = num(key, value)?,
            "max_new" => self.max_new = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "base_lr" => self.train.base_lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "warmup_frac" => self.train.warmup_frac = num(key, value)?,
            "total_steps" => self.train.total_steps = Some(num(key, value)?),
            other => {
                if !self.decoder.to_pairs().iter().any(|(k, _)| *k == other) {
                    return Err(Error::invalid(format!("unknown key {other:?}")));
                }
                self.decoder.set(other, num(other, value)?);
            }
        }
        Ok(())
    }
}
