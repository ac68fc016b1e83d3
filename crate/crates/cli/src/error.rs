use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] laneseq_train::TrainError),
    #[error(transparent)]
    Model(#[from] laneseq_model::ModelError),
    #[error(transparent)]
    Dataset(#[from] laneseq_core::synthdata::DatasetError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 usage, 2 verification failure, 3 runtime error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Train(laneseq_train::TrainError::MissingPretrained) => 1,
            CliError::Verification(_) => 2,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
