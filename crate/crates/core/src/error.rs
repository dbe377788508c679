use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{field}`: {message}")]
    Validation {
        field: &'static str,
        message: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("allocation failure: {needed} blocks requested, {free} free")]
    AllocationFailure { needed: usize, free: usize },

    /// A policy produced a plan the engine cannot execute. Never repaired.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(field: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::InvariantViolation(_) | Error::AllocationFailure { .. } | Error::State(_) => 3,
            Error::Config(_) | Error::Validation { .. } | Error::Parse { .. } => 1,
        }
    }
}
