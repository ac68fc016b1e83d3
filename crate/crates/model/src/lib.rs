//! Encoder-decoder lane-sequence model on a minimal reverse-mode autodiff core.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod params;
pub mod transformer;

use thiserror::Error;

pub use config::{CoordInit, ModelConfig};
pub use params::{Gradients, ParamId, ParameterStore};
pub use transformer::{EncoderOutput, LaneTransformer, SampledSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph already released by a previous backward pass")]
    GraphReleased,
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {}x{}, model expects {}x{}", got.0, got.1, expected.0, expected.1)]
    DimMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("sequence of length {len} exceeds the maximum {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
