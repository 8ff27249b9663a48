use std::io;

use thiserror::Error;

pub type Result<T, E = GeoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint does not match model: {}", .0.join("; "))]
    ShapeMismatch(Vec<String>),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GeoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Self::Dimension(msg.into())
    }
}
