use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: {0}")]
    Length(String),

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite value in {component} at step {step}")]
    NonFinite { component: String, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-parsable class name, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Length(_) => "length",
            Error::Decode { .. } => "decode",
            Error::Checkpoint(_) => "checkpoint",
            Error::Integrity(_) => "integrity",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
