use std::path::PathBuf;

use thiserror::Error;

use crate::validator::Violation;

/// Errors raised across the training engine.
#[derive(Debug, Error)]
pub enum DpError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("numeric error in parameter `{param}`: {detail}")]
    Numeric { param: String, detail: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("ingestion error in {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("model failed validation with {} violation(s)", .0.len())]
    Validation(Vec<Violation>),

    #[error("rng error: {0}")]
    Rng(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpError>;

pub(crate) fn dim_err(msg: impl Into<String>) -> DpError {
    DpError::Dimension(msg.into())
}

pub(crate) fn param_err(msg: impl Into<String>) -> DpError {
    DpError::Parameter(msg.into())
}
