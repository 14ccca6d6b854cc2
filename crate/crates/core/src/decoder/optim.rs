use std::f64::consts::PI;

use super::config::TrainConfig;
use super::model::Weights;

/// Linear warm-up from 0 to `base_lr` over `warmup` steps, then cosine
/// annealing to 0 at `total`.
pub fn cosine_schedule(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay. Moments share the parameter layout.
#[derive(Clone, Debug)]
pub struct AdamW {
    first: Weights,
    second: Weights,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &Weights, cfg: &TrainConfig) -> Self {
        AdamW {
            first: params.zeros_like(),
            second: params.zeros_like(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update with 1-based `step` and learning rate `lr`.
    pub fn step(&mut self, params: &mut Weights, grads: &Weights, step: usize, lr: f64) {
        assert!(step >= 1, "AdamW steps are 1-based");
        let mut m = self.first.named_mut();
        let mut v = self.second.named_mut();
        for (i, ((_, p), (_, g))) in params.named_mut().into_iter().zip(grads.named()).enumerate() {
            adamw_update(
                p.as_mut_slice(),
                g.as_slice(),
                m[i].1.as_mut_slice(),
                v[i].1.as_mut_slice(),
                step,
                lr,
                (self.beta1, self.beta2, self.eps, self.weight_decay),
            );
        }
    }
}

/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    (beta1, beta2, eps, weight_decay): (f64, f64, f64, f64),
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        params[i] -= lr * (update + weight_decay * params[i]);
    }
}
