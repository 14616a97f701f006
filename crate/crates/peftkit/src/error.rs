//! Error kinds shared across the crate.
//!
//! The CLI maps these onto its exit-code contract: configuration and usage
//! problems exit 1, data problems exit 2, numerical failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (model geometry, adapter spec, train plan, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid runtime input (out-of-range ids, unknown tags, bad labels).
    #[error("input error: {0}")]
    Input(String),

    /// Data-level failure (empty corpus, no valid triples, malformed records).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (NaN gradients, undefined correlation).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container mismatch (bad magic, version, or manifest).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Serialization / parsing failure of configs and reports.
    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code bucket for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 1,
            Error::Dimension(_) | Error::Input(_) | Error::Data(_) => 2,
            Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
