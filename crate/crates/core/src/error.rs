use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the histotune core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient tissue: {retained} pixels above the OD threshold, need at least {required}")]
    InsufficientTissue { retained: usize, required: usize },

    #[error("degenerate stains: optical-density cloud has rank < 2")]
    DegenerateStains,

    #[error("failed to read {path}: {message}")]
    ItemError { path: PathBuf, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("numerical failure: {0}")]
    NumericalError(String),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("patient {0} has no tiles")]
    EmptyPatient(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("invalid fold plan: {0}")]
    InvalidPlan(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeError(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
