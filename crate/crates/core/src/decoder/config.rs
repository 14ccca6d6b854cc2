use crate::error::{Error, Result};

/// Shape of the decoder. The patch embedder maps `patch_dim` features per
/// visual token to `d_model`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub visual_len: usize,
    /// Context length after positional interpolation.
    pub max_pos: usize,
    /// Length of the positional table before interpolation.
    pub native_pos: usize,
    pub ffn_mult: usize,
    pub patch_dim: usize,
}

impl DecoderConfig {
    /// Desk-scale default: 8x8 visual grid of 4x4 patches.
    pub fn toy(vocab_size: usize) -> Self {
        DecoderConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            vocab_size,
            visual_len: 64,
            max_pos: 128,
            native_pos: 64,
            ffn_mult: 4,
            patch_dim: 16,
        }
    }

    /// The full-scale shape: GPT-2 small over 1024 visual tokens, context
    /// stretched from 1024 to 2048 positions, 384-wide encoder features.
    pub fn full_scale() -> Self {
        DecoderConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            vocab_size: 50257,
            visual_len: 1024,
            max_pos: 2048,
            native_pos: 1024,
            ffn_mult: 4,
            patch_dim: 384,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Side of the square visual grid.
    pub fn grid_side(&self) -> usize {
        (self.visual_len as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("visual_len", self.visual_len),
            ("ffn_mult", self.ffn_mult),
            ("patch_dim", self.patch_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_pos < self.visual_len + 1 {
            return Err(Error::invalid(format!(
                "max_pos {} cannot hold {} visual tokens plus a start token",
                self.max_pos, self.visual_len
            )));
        }
        if self.native_pos < 2 || self.native_pos > self.max_pos {
            return Err(Error::invalid(format!(
                "native_pos {} must lie in 2..={}",
                self.native_pos, self.max_pos
            )));
        }
        let side = self.grid_side();
        if side * side != self.visual_len {
            return Err(Error::invalid(format!(
                "visual_len {} is not a square grid",
                self.visual_len
            )));
        }
        Ok(())
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("visual_len", self.visual_len),
            ("max_pos", self.max_pos),
            ("native_pos", self.native_pos),
            ("ffn_mult", self.ffn_mult),
            ("patch_dim", self.patch_dim),
        ]
    }

    pub(crate) fn set(&mut self, key: &str, value: usize) -> bool {
        let slot = match key {
            "d_model" => &mut self.d_model,
            "n_layers" => &mut self.n_layers,
            "n_heads" => &mut self.n_heads,
            "vocab_size" => &mut self.vocab_size,
            "visual_len" => &mut self.visual_len,
            "max_pos" => &mut self.max_pos,
            "native_pos" => &mut self.native_pos,
            "ffn_mult" => &mut self.ffn_mult,
            "patch_dim" => &mut self.patch_dim,
            _ => return false,
        };
        *slot = value;
        true
    }
}

/// Optimisation hyperparameters. Defaults are the full-scale fine-tuning recipe:
/// AdamW, lr 1e-5, batch 16, 3 epochs, weight decay 0.01, 5% linear warm-up
/// then cosine annealing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Overrides `epochs` when set.
    pub total_steps: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-5,
            batch_size: 16,
            epochs: 3,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            total_steps: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Number of optimiser updates for a training set of `n_train` examples.
    pub fn resolved_total_steps(&self, n_train: usize) -> usize {
        self.total_steps
            .unwrap_or_else(|| self.epochs * n_train.div_ceil(self.batch_size.max(1)))
    }

    /// Warm-up length, always strictly below `total` when `total > 0`.
    pub fn warmup_steps(&self, total: usize) -> usize {
        if total == 0 {
            return 0;
        }
        ((self.warmup_frac * total as f64).ceil() as usize).min(total - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base_lr {} is not a valid rate", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid(format!(
                "warmup_frac {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}
