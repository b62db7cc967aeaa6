use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by tensor construction, model building, dataset parsing
/// and artifact (de)serialization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Config-file parse error anchored to a 1-based line number.
    #[error("config line {line}: {reason}")]
    ConfigLine { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Binary-format parse error anchored to a byte offset.
    #[error("{path}: at byte offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("value {value} at flat index {index} is not +1 or -1")]
    NotBinary { value: f64, index: usize },

    #[error("cannot export packed model: {0}")]
    Export(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
