use thiserror::Error;

/// Errors produced by the intent-prediction pipeline.
#[derive(Debug, Error)]
pub enum ZiaError {
    /// A configuration value violates its documented invariant.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument passed to an operation is malformed.
    #[error("argument error: {0}")]
    Argument(String),
    /// A numerical routine failed (singular matrix, non-finite values, ...).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A type invariant was violated at runtime.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ZiaError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ZiaError::Config(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ZiaError::Argument(msg.into()))
}
