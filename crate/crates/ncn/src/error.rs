//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or usage (bad hyperparameter, schema violation,
    /// mismatched K between artifacts).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (bad CSV cell, index out of
    /// range, corrupt grid file).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Shape(_) | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
