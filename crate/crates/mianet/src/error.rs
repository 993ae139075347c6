//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid target size")]
    InvalidTargetSize,
    #[error("pooling cannot upsample")]
    PoolUpsample,
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid stride: {0}")]
    InvalidStride(usize),
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
