//! Crate-wide error type.
//!
//! Variants are grouped by the failure class they report; the CLI maps each
//! class onto a stable exit code (see `cli::exit_code`).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite values or degenerate numeric state.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid packed ternary data (reserved code, bad length).
    #[error("codec error: {0}")]
    Codec(String),

    /// Out-of-range argument to an operation.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Invalid configuration (violated constraint).
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (call sequence or operand contract violated).
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent or missing data (e.g. query without ground truth).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk artifact (bad magic, truncation, version).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
