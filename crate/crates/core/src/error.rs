//! Error type shared across the crate.
//!
//! Tensor-level shape violations panic (they are programming or configuration
//! bugs and config validation rejects them before compute starts); everything
//! that can be triggered by user input (files, configs, token ids, numeric
//! failures at run time) is reported through [`MqError`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MqError {
    /// Invalid configuration or invalid user input (CLI exit code 1).
    #[error("config: {0}")]
    Config(String),

    /// Malformed file contents: bad magic, truncation, shape headers.
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Numeric failure at run time: NaN loss, gradient check above
    /// threshold (CLI exit code 2).
    #[error("numeric: {0}")]
    Numeric(String),
}

impl MqError {
    pub fn config(msg: impl Into<String>) -> Self {
        MqError::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        MqError::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        MqError::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 1 for validation problems, 2 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            MqError::Numeric(_) => 2,
            _ => 1,
        }
    }
}
