use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence length {len} exceeds max_positions {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("task index {index} out of range (model has {count} tasks)")]
    TaskOutOfRange { index: usize, count: usize },

    #[error("gradient check rejected: {0}")]
    GradCheck(String),

    #[error("backbone fingerprint mismatch for task '{task}': expected {expected}, found {found}")]
    FingerprintMismatch {
        task: String,
        expected: String,
        found: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient records for '{category}': need {needed}, have {available}")]
    InsufficientRecords {
        category: String,
        needed: usize,
        available: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line tool: 1 for usage and
    /// configuration errors, 3 for numeric failure, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::NonFiniteLoss { .. } | Error::GradCheck(_) => 3,
            _ => 2,
        }
    }
}
