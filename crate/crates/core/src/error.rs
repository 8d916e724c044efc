use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("corrupt {format} data at byte {offset}: {reason}")]
    Corrupt {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: loss {loss} vs initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("test split access denied to stage `{0}`")]
    Leakage(String),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("config error on line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes and the C ABI.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => ErrorCategory::InvalidArgument,
            Error::Corrupt { .. } => ErrorCategory::Corrupt,
            Error::Numerical(_) | Error::Diverged { .. } => ErrorCategory::Numerical,
            Error::Leakage(_) => ErrorCategory::Leakage,
            Error::MissingArtifact { .. } => ErrorCategory::MissingArtifact,
            Error::Config { .. } => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ErrorCategory {
    InvalidArgument = 2,
    Corrupt = 3,
    Numerical = 4,
    Leakage = 5,
    MissingArtifact = 6,
    Config = 7,
    Io = 8,
}

pub type Result<T> = std::result::Result<T, Error>;
