use std::io;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum CareError {
    /// Invalid configuration value or unknown config key.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed user input (unknown words, missing files, bad ids).
    #[error("input error: {0}")]
    Input(String),
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Non-finite loss, representation collapse and similar training failures.
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CareError {
    /// True for errors caused by bad configuration or input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(self, CareError::Config(_) | CareError::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, CareError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::CareError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
