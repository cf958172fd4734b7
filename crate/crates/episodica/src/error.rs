//! Error types shared across the crate.
//!
//! Errors are grouped by what went wrong rather than where: configuration
//! problems, data/format problems, shape/contract violations, and numeric
//! domain failures. The CLI maps these groups onto process exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unparsable config text.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or malformed input data (files, manifests, image payloads).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape or API contract violation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numeric domain failure (log of non-positive, degenerate input, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    /// Shape violations are programming errors surfaced as config-class
    /// failures when they reach the CLI boundary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
