use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("ingestion error at line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("ingestion error: {0}")]
    IngestFile(String),

    #[error("filtering removed all data")]
    EmptyAfterFilter,

    #[error("split error: {0}")]
    Split(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
