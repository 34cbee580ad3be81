//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors raised by model construction, estimation, planning, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, probabilities, schedules, or
    /// option combinations. The message names the offending field or value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two containers that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numeric operation failed (non-positive-definite matrix where
    /// positive definiteness is required, non-finite intermediate, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The plan optimizer could not produce a usable iterate.
    #[error("solver failure: {0}")]
    Solver(String),

    /// Malformed text input; the message names the offending field.
    #[error("parse error: {0}")]
    Parse(String),

    /// Filesystem error annotated with the path that failed.
    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io_at(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoAt { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
