use laneseq_core::codec::SequenceFormat;
use laneseq_core::metrics::MatchParams;
use laneseq_core::rewards::reward_lanes;
use laneseq_model::{Gradients, LaneTransformer, SampledSequence};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{item_rng, scene_codec, Example};
use crate::optim::{clip_grad_norm, AdamW};
use crate::pretrain::{epoch_order, reduce_in_order};
use crate::TrainError;

pub(crate) const MFRL_TAG: u64 = 0x3f1;
const MFRL_SHUFFLE_TAG: u64 = 0x3f2;

/// A stochastic sequence model whose score function can be evaluated.
pub trait SequencePolicy {
    type Sample;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Self::Sample;
    /// Gradient of `log Q(sample)` with respect to the flattened parameters.
    fn grad_log_prob(&self, sample: &Self::Sample) -> Vec<f64>;
}

/// Gradient sample `a` and baseline sample `b` drawn for the same prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePair<S> {
    pub sample_a: S,
    pub sample_b: S,
    pub reward_a: f64,
    pub reward_b: f64,
}

impl<S> BaselinePair<S> {
    pub fn draw(mut sample: impl FnMut() -> S, reward: impl Fn(&S) -> f64) -> Self {
        let sample_a = sample();
        let sample_b = sample();
        let (reward_a, reward_b) = (reward(&sample_a), reward(&sample_b));
        Self { sample_a, sample_b, reward_a, reward_b }
    }

    /// `r = R(a) - R(b)`; a plain number, so nothing flows back through it.
    pub fn advantage(&self) -> f64 {
        self.reward_a - self.reward_b
    }
}

/// Per-coordinate sample mean and variance of an estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub draws: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl EstimatorStats {
    pub fn standard_error(&self, i: usize) -> f64 {
        (self.variance[i] / self.draws as f64).sqrt()
    }

    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }
}

/// Monte-Carlo estimate of `grad sum_t Q(t) R(t)` from `draws` pairs.
///
/// With `baseline` each draw contributes `(R(a) - R(b)) grad log Q(a)`,
/// without it `R(a) grad log Q(a)`. The sample `a` sequence is the same for
/// both variants given the same seed.
pub fn estimate_gradient<P: SequencePolicy>(
    policy: &P,
    reward: impl Fn(&P::Sample) -> f64,
    draws: usize,
    rng: &mut ChaCha8Rng,
    baseline: bool,
) -> EstimatorStats {
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for k in 0..draws {
        let pair = BaselinePair::draw(|| policy.sample(rng), &reward);
        let weight = if baseline { pair.advantage() } else { pair.reward_a };
        let g = policy.grad_log_prob(&pair.sample_a);
        if mean.is_empty() {
            mean = vec![0.0; g.len()];
            m2 = vec![0.0; g.len()];
        }
        let n = (k + 1) as f64;
        for ((mu, s), gi) in mean.iter_mut().zip(m2.iter_mut()).zip(&g) {
            let x = weight * gi;
            let d = x - *mu;
            *mu += d / n;
            *s += d * (x - *mu);
        }
    }
    let variance = m2.iter().map(|s| s / (draws.max(2) - 1) as f64).collect();
    EstimatorStats { draws, mean, variance }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReinforceStats {
    /// Mean reward of the gradient samples per format; `None` when disabled.
    pub reward: [Option<f64>; 3],
    pub mean_abs_advantage: f64,
    pub pairs: usize,
    pub steps: usize,
}

struct ImageOutcome {
    grads: Gradients,
    rewards: [Option<f64>; 3],
    abs_adv: f64,
    pairs: usize,
}

fn sample_reward(model: &LaneTransformer, ex: &Example, fmt: SequenceFormat, s: &SampledSequence, cfg: &TrainConfig) -> f64 {
    let codec = scene_codec(model.vocab(), ex.dims, usize::MAX);
    let lanes = codec.decode(&s.tokens.tokens).map(|d| d.lanes).unwrap_or_default();
    reward_lanes(fmt, &lanes, ex.gt(fmt), ex.dims, &cfg.rewards, &MatchParams::with_tau(cfg.tau)).total
}

fn image_step(
    model: &LaneTransformer,
    ex: &Example,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    batch_len: usize,
) -> Result<ImageOutcome, TrainError> {
    let enc = model.encode(&ex.image)?;
    let mut rewards = [None; 3];
    let mut terms: Vec<(Vec<laneseq_core::codec::Token>, f64)> = Vec::new();
    let mut abs_adv = 0.0;
    let mut pairs = 0;
    for fmt in SequenceFormat::ALL {
        if !cfg.reward_toggles.enabled(fmt) {
            continue;
        }
        let mut err = None;
        let pair = BaselinePair::draw(
            || match model.sample_sequence(&enc, fmt, cfg.temperature, None, rng) {
                Ok(s) => Some(s),
                Err(e) => {
                    err.get_or_insert(e);
                    None
                }
            },
            |s| s.as_ref().map_or(0.0, |s| sample_reward(model, ex, fmt, s, cfg)),
        );
        if let Some(e) = err {
            return Err(e.into());
        }
        let (Some(a), Some(b)) = (&pair.sample_a, &pair.sample_b) else { unreachable!() };
        let r = pair.advantage();
        rewards[fmt.index()] = Some(pair.reward_a);
        abs_adv += r.abs();
        pairs += 1;
        let scale = cfg.rewards.objective_scale(fmt) * r / batch_len as f64;
        if cfg.symmetric_baseline {
            terms.push((a.tokens.tokens.clone(), scale / 2.0));
            terms.push((b.tokens.tokens.clone(), -scale / 2.0));
        } else {
            terms.push((a.tokens.tokens.clone(), scale));
        }
    }
    let refs: Vec<(&[laneseq_core::codec::Token], f64)> = terms.iter().map(|(t, s)| (t.as_slice(), *s)).collect();
    let mut grads = model.policy_grads(&ex.image, &refs)?;
    if cfg.mfrl_ce_weight > 0.0 {
        let seqs: Vec<_> = SequenceFormat::ALL.iter().map(|f| ex.target(*f)).collect();
        let (_, g) = model.loss_and_grads(&ex.image, &seqs)?;
        grads.merge_scaled(&g, cfg.mfrl_ce_weight / batch_len as f64);
    }
    Ok(ImageOutcome { grads, rewards, abs_adv, pairs })
}

/// One REINFORCE update from a batch of images: two samples per enabled
/// format, advantage-weighted log-likelihood of the first, scaled by the
/// format's objective weight.
pub fn reinforce_step(
    batch: &[&Example],
    model: &mut LaneTransformer,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ReinforceStats, TrainError> {
    let m: &LaneTransformer = model;
    let outcomes: Vec<Result<ImageOutcome, TrainError>> = batch
        .par_iter()
        .map(|ex| {
            let mut rng = item_rng(cfg.seed, MFRL_TAG, epoch, ex.index);
            image_step(m, ex, cfg, &mut rng, batch.len())
        })
        .collect();
    let mut parts = Vec::with_capacity(batch.len());
    let mut stats = ReinforceStats::default();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for o in outcomes {
        let o = o?;
        for (i, r) in o.rewards.iter().enumerate() {
            if let Some(r) = r {
                sums[i] += r;
                counts[i] += 1;
            }
        }
        stats.mean_abs_advantage += o.abs_adv;
        stats.pairs += o.pairs;
        parts.push(o.grads);
    }
    stats.mean_abs_advantage /= stats.pairs.max(1) as f64;
    stats.reward = std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64));
    stats.steps = 1;
    let grads = reduce_in_order(parts);
    model.store.zero_grad();
    model.store.accumulate(&grads, 1.0);
    clip_grad_norm(&mut model.store, cfg.grad_clip);
    opt.step(&mut model.store);
    Ok(stats)
}

/// A stage-2 epoch over (at most `mfrl_images_per_epoch` of) the training set.
pub fn mfrl_epoch(
    examples: &[Example],
    model: &mut LaneTransformer,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ReinforceStats, TrainError> {
    let mut order = epoch_order(examples.len(), cfg.seed, MFRL_SHUFFLE_TAG, epoch);
    if let Some(n) = cfg.mfrl_images_per_epoch {
        order.truncate(n);
    }
    let mut total = ReinforceStats::default();
    let mut sums = [0.0; 3];
    let mut weights = [0usize; 3];
    let mut adv = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let s = reinforce_step(&batch, model, opt, cfg, epoch)?;
        for i in 0..3 {
            if let Some(r) = s.reward[i] {
                sums[i] += r * batch.len() as f64;
                weights[i] += batch.len();
            }
        }
        adv += s.mean_abs_advantage * s.pairs as f64;
        total.pairs += s.pairs;
        total.steps += 1;
    }
    total.reward = std::array::from_fn(|i| (weights[i] > 0).then(|| sums[i] / weights[i] as f64));
    total.mean_abs_advantage = adv / total.pairs.max(1) as f64;
    Ok(total)
}
