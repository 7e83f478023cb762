use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric `{metric}` undefined: {reason}")]
    MetricUndefined { metric: &'static str, reason: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Config { .. } | Error::MetricUndefined { .. } => 3,
            Error::Diverged { .. } | Error::NonFinite(_) => 4,
            Error::Io { .. } | Error::Parse(_) | Error::InvalidInput(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
