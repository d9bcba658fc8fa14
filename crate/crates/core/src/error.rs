use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient for kernel {kernel} (group {group})")]
    NonFiniteGradient { group: &'static str, kernel: usize },

    #[error("no voxel exceeds the threshold {delta}; lower the initialization threshold")]
    NoCandidates { delta: f64 },

    #[error("backward pass called without matching forward state: {0}")]
    MissingForwardState(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("training diverged at iteration {iteration}; last good state saved to {checkpoint:?}")]
    Diverged {
        iteration: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        message: msg.into(),
    }
}
