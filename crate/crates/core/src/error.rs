use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DvcError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor format error in {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("video {video}: missing feature file {path}")]
    MissingFeature { video: String, path: PathBuf },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("only {available} eligible concept words, {requested} requested")]
    NotEnoughConcepts { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matching error: {0}")]
    Matching(String),

    #[error("non-finite loss in {component}: {value}")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = DvcError> = std::result::Result<T, E>;
