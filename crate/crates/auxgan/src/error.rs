//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or configuration mismatch detected while wiring tensors together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two feature maps that must agree on batch/spatial dims do not.
    #[error("alignment error in {module}: {detail}")]
    Alignment { module: String, detail: String },

    /// A numeric invariant was violated (NaN/Inf, degenerate variance, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Problems with datasets or image decoding.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint / tensor-archive serialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Invalid run configuration (cross-field validation, unknown preset, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
