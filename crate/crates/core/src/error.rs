//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-supplied value violates an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// A file is malformed (bad magic bytes, dtype tag, rank, payload size).
    #[error("format error: {0}")]
    Format(String),

    /// An internal protocol contract was violated (missing layer, non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// A required input artifact (dataset, run directory) is absent.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
