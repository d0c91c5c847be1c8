//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameter, inconsistent splits, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Input data does not match the declared schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell or row could not be parsed.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Structurally valid input that cannot be used (empty set, missing split, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (non-finite loss, domain violation, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API contract violation (wrong module wiring, shape mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint does not match the data it is applied to.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
