//! Error type shared by every module of the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape or dimension mismatch,
    /// evaluation-only feature used in deployment mode, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite gradient or loss encountered while training.
    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("convergence check failed: {0}")]
    Convergence(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Domain(_) | Error::Index(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Training { .. } | Error::Sampling(_) | Error::Convergence(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
