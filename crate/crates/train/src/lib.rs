//! Two-stage training: teacher-forced pretraining, then multi-format
//! REINFORCE tuning against the metric rewards.

pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod pretrain;
pub mod reinforce;
pub mod run;
pub mod toy;

use laneseq_core::codec::CodecError;
use laneseq_core::synthdata::DatasetError;
use laneseq_model::ModelError;

pub use config::{Stage, TrainConfig};
pub use data::{prepare_dataset, Example};
pub use eval::{evaluate, EvalSummary, FormatEval};
pub use optim::AdamW;
pub use pretrain::{pretrain_epoch, PretrainStats};
pub use reinforce::{reinforce_step, BaselinePair, ReinforceStats, SequencePolicy};
pub use run::{run_training, MetricsRow, TrainingOutcome};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at {stage} epoch {epoch}, example {example}")]
    NonFinite { what: String, stage: Stage, epoch: usize, example: u64 },
    #[error("stage 2 needs a stage-1 checkpoint: tuning from scratch does not converge, run pretraining first")]
    MissingPretrained,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
}
