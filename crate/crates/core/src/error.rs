use std::io;

use thiserror::Error;

/// Errors raised across the editing stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
