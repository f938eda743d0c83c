//! Crate-wide error type with CLI exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad flags, fractions, hyperparameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data does not match the declared schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A record failed validation; `row` is the 1-based CSV data row when known.
    #[error("validation error{}: {message}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Validation {
        row: Option<usize>,
        message: String,
    },

    /// A requested split produced an empty part.
    #[error("split error: {0}")]
    Split(String),

    /// Non-finite values or other numerical failures; `context` locates the failure.
    #[error("numerical error: {context}")]
    Numeric { context: String },

    /// Training diverged or otherwise failed at a specific epoch.
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 0 success, 2 configuration, 3 data validation,
    /// 4 numerical/training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Split(_) | Error::Io { .. } | Error::Json(_) => 2,
            Error::Schema(_) | Error::Validation { .. } => 3,
            Error::Numeric { .. } | Error::Training { .. } => 4,
        }
    }

    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
