//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        got: String,
    },

    #[error("tensor shape error: {0}")]
    BadShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("gradient check rejected: pre-activation within {margin} of a kink at {coordinate}")]
    KinkProximity { coordinate: String, margin: f32 },

    #[error("dataset construction failed: no survivors for original label {original} -> target {target}")]
    EmptyCell { original: usize, target: usize },

    #[error("file format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unknown pipeline name: {0}")]
    UnknownPipeline(String),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
