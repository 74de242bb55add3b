//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A configuration value is invalid (indivisible channels, bad sizes, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A numerical evaluation failed (non-finite values, divergence).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// View labeling failed (missing keypoints).
    #[error("labeling error: {0}")]
    Labeling(String),

    /// Sliding-window coverage has gaps.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// File I/O or parse failure.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
