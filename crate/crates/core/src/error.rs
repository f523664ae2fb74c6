use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any differentiable input")]
    DetachedLoss,

    #[error("variable belongs to a tape generation that has been reset")]
    StaleVar,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is not divisible by {1}")]
    Divisibility(usize, usize),

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("checkpoint format version {found} does not match expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("parameter count {count} exceeds dense Hessian guard {limit}")]
    HessianGuard { count: usize, limit: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
