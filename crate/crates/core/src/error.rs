use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TmagError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TmagError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("users without support interactions (complete cold-start is not handled): {0:?}")]
    EmptySupport(Vec<usize>),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing artifact {path}: run {command} first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TmagError {
    /// Process exit status for the command line: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            TmagError::Usage(_) => 1,
            TmagError::Numeric(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        TmagError::Data(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        TmagError::Numeric(msg.into())
    }
}
