use std::path::PathBuf;

use mambajscc_core::{CodecError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed image: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("non-finite loss {loss} at step {step} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { step: usize, loss: f64, batch_seed: u64 },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
