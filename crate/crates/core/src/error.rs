//! Error types shared across the crate.

use thiserror::Error;

/// Errors surfaced by policy, objective, gradient and config operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A sequence referenced a prefix node the policy does not define,
    /// or table shapes disagree.
    #[error("inconsistent policy: {0}")]
    InconsistentPolicy(String),

    /// Configuration is structurally invalid; `path` names the offending
    /// field in dotted form.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A numerical evaluation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An input exceeded an enumeration or size bound.
    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
