use std::path::PathBuf;

use thiserror::Error;

use crate::search::SearchOutcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, configurations or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A forward or backward computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was invoked in the wrong order (e.g. optimizer step before backward).
    #[error("state error: {0}")]
    State(String),

    #[error("data error at {}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    /// Malformed or mismatched checkpoint, table, or report file.
    #[error("format error: {0}")]
    Format(String),

    /// The greedy search hit every floor before satisfying its objective.
    #[error("objective unreachable: {message}")]
    UnreachableObjective {
        message: String,
        best: Box<SearchOutcome>,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::Format(_) | Error::Io { .. } => 3,
            Error::UnreachableObjective { .. } => 4,
            Error::Numeric(_) | Error::State(_) => 1,
        }
    }
}
