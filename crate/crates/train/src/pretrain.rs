use laneseq_core::codec::SequenceFormat;
use laneseq_model::{Gradients, LaneTransformer, ModelError};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Stage, TrainConfig};
use crate::data::{item_rng, Example};
use crate::optim::{clip_grad_norm, AdamW};
use crate::TrainError;

pub(crate) const SHUFFLE_TAG: u64 = 0x5f1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    /// Mean per-sequence loss, indexed by `SequenceFormat::index`.
    pub loss: [f64; 3],
    pub steps: usize,
}

impl PretrainStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss.iter().sum::<f64>() / 3.0
    }
}

/// Epoch order: a seeded shuffle of example positions.
pub fn epoch_order(n: usize, seed: u64, tag: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut item_rng(seed, tag, epoch, u64::MAX));
    order
}

/// Sums per-example gradients in batch order so the result does not depend
/// on thread scheduling.
pub(crate) fn reduce_in_order(parts: Vec<Gradients>) -> Gradients {
    let mut acc = Gradients::default();
    for p in &parts {
        acc.merge_scaled(p, 1.0);
    }
    acc
}

/// One pass of teacher-forced training over all three formats per image.
pub fn pretrain_epoch(
    examples: &[Example],
    model: &mut LaneTransformer,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<PretrainStats, TrainError> {
    let order = epoch_order(examples.len(), cfg.seed, SHUFFLE_TAG, epoch);
    let mut loss_sum = [0.0; 3];
    let mut steps = 0;
    for batch in order.chunks(cfg.batch_size) {
        let m: &LaneTransformer = model;
        let results: Vec<Result<(Vec<f64>, Gradients), ModelError>> = batch
            .par_iter()
            .map(|&i| {
                let ex = &examples[i];
                let seqs: Vec<_> = SequenceFormat::ALL.iter().map(|f| ex.target(*f)).collect();
                m.loss_and_grads(&ex.image, &seqs)
            })
            .collect();
        let mut parts = Vec::with_capacity(batch.len());
        for (r, &i) in results.into_iter().zip(batch) {
            let (losses, g) = r.map_err(|e| match e {
                ModelError::NonFinite(what) => {
                    TrainError::NonFinite { what, stage: Stage::Pretrain, epoch, example: examples[i].index }
                }
                other => TrainError::Model(other),
            })?;
            for (s, l) in loss_sum.iter_mut().zip(&losses) {
                *s += l;
            }
            parts.push(g);
        }
        let grads = reduce_in_order(parts);
        model.store.zero_grad();
        model.store.accumulate(&grads, 1.0 / batch.len() as f64);
        clip_grad_norm(&mut model.store, cfg.grad_clip);
        opt.step(&mut model.store);
        steps += 1;
    }
    let n = examples.len().max(1) as f64;
    Ok(PretrainStats { loss: loss_sum.map(|s| s / n), steps })
}
