//! Error type shared across the crate.
//!
//! The variants map onto the CLI exit-code contract: configuration errors
//! exit with 2, data errors with 3, numerical failures with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A spec, shape or option is inconsistent (wrong channel count,
    /// indivisible ratio, mismatched dimensions, bad config file).
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller violated a documented precondition (empty input set,
    /// out-of-range class id, indivisible spatial dims).
    #[error("usage error: {0}")]
    Usage(String),

    /// Problems with on-disk datasets: missing pairs, unreadable files,
    /// invalid mask values.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("numerical failure: non-finite loss at epoch {epoch}, batch {batch}, lr {lr:e}")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    /// Exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
