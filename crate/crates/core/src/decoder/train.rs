use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{DecoderModel, TrainItem};
use super::optim::{cosine_schedule, AdamW};
use crate::bias::BiasPlan;
use crate::error::Result;
use crate::numerics::Matrix;

/// An owned training sequence: patch features, target tokens (ending with the
/// end token) and the bias plan derived from the example's masks.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub patches: Matrix,
    pub target: Vec<usize>,
    pub plan: Option<BiasPlan>,
}

impl TrainExample {
    pub fn as_item(&self) -> TrainItem<'_> {
        TrainItem {
            patches: &self.patches,
            target: &self.target,
            plan: self.plan.as_ref(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Teacher-forced training with AdamW and warm-up + cosine decay. Batches
/// walk a seeded per-epoch shuffle of `data`. Returns one record per update.
pub fn train(
    model: &mut DecoderModel,
    data: &[TrainExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let total = cfg.resolved_total_steps(data.len());
    if total == 0 || data.is_empty() {
        return Ok(Vec::new());
    }
    let warmup = cfg.warmup_steps(total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(model.weights(), cfg);
    let mut records = Vec::with_capacity(total);

    for step in 1..=total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].as_item());
            cursor += 1;
        }
        let (loss, grads) = model.loss_and_grad(&batch)?;
        let lr = cosine_schedule(step, total, warmup, cfg.base_lr);
        opt.step(model.weights_mut(), &grads, step, lr);
        let record = StepRecord { step, lr, loss };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}
