use std::path::PathBuf;

use mganet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model or training configuration: {0}")]
    InvalidConfig(String),
    #[error("training needs at least one sample")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mganet_core::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
