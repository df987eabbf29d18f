//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or channel counts do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of its allowed range.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure: singular matrix, non-finite loss, failed factorization.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents (image headers, checkpoints, tensor dumps).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
