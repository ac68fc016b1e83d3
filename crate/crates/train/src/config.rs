use laneseq_core::codec::SequenceFormat;
use laneseq_core::metrics::DEFAULT_TAU;
use laneseq_core::rewards::RewardWeights;
use laneseq_core::synthdata::AugmentConfig;
use serde::{Deserialize, Serialize};

use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Mfrl,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Mfrl => "mfrl",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which format rewards stage 2 optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardToggles {
    pub segmentation: bool,
    pub anchor: bool,
    pub parameter: bool,
}

impl Default for RewardToggles {
    fn default() -> Self {
        Self { segmentation: true, anchor: true, parameter: true }
    }
}

impl RewardToggles {
    pub fn only(fmt: SequenceFormat) -> Self {
        Self {
            segmentation: fmt == SequenceFormat::Segmentation,
            anchor: fmt == SequenceFormat::Anchor,
            parameter: fmt == SequenceFormat::Parameter,
        }
    }

    pub fn enabled(&self, fmt: SequenceFormat) -> bool {
        match fmt {
            SequenceFormat::Segmentation => self.segmentation,
            SequenceFormat::Anchor => self.anchor,
            SequenceFormat::Parameter => self.parameter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub mfrl_epochs: usize,
    pub learning_rate: f64,
    /// Stage-2 learning rate; falls back to `learning_rate` when unset.
    pub mfrl_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, 0 disables.
    pub grad_clip: f64,
    pub rewards: RewardWeights,
    pub reward_toggles: RewardToggles,
    pub tau: f64,
    pub temperature: f64,
    /// Also use the baseline sample with the negated advantage.
    pub symmetric_baseline: bool,
    /// Weight of a teacher-forced loss kept alongside REINFORCE in stage 2.
    pub mfrl_ce_weight: f64,
    /// Stage-2 passes over at most this many training images per epoch.
    pub mfrl_images_per_epoch: Option<usize>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub max_lanes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            pretrain_epochs: 10,
            mfrl_epochs: 10,
            learning_rate: 1e-4,
            mfrl_learning_rate: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            rewards: RewardWeights::default(),
            reward_toggles: RewardToggles::default(),
            tau: DEFAULT_TAU,
            temperature: 1.0,
            symmetric_baseline: false,
            mfrl_ce_weight: 0.0,
            mfrl_images_per_epoch: None,
            augment: false,
            augmentation: AugmentConfig::default(),
            max_lanes: laneseq_core::codec::DEFAULT_MAX_LANES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("eps", self.eps)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(lr) = self.mfrl_learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("mfrl_learning_rate must be positive, got {lr}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.mfrl_ce_weight >= 0.0) {
            return bad("weight_decay, grad_clip and mfrl_ce_weight must be non-negative".into());
        }
        if !self.rewards.is_valid() {
            return bad("reward weights must be finite and non-negative".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_lanes == 0 {
            return bad("max_lanes must be positive".into());
        }
        Ok(())
    }

    pub fn stage_learning_rate(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Pretrain => self.learning_rate,
            Stage::Mfrl => self.mfrl_learning_rate.unwrap_or(self.learning_rate),
        }
    }
}
