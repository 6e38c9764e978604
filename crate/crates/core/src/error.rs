//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty objective")]
    EmptyObjective,

    #[error("series too short: length {len} < required {required}")]
    SeriesTooShort { len: usize, required: usize },

    #[error("non-finite value in {context} (block {block})")]
    NonFinite { context: String, block: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset for client {0}")]
    EmptyDataset(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
