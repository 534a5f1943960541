use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] diffcore::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("fingerprint mismatch: statistics for `{archive}` but model is `{model}`")]
    Fingerprint { archive: String, model: String },
    #[error("non-finite value at {0}")]
    Numeric(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::Tensor(diffcore::Error::NonFinite(_)) => 3,
            Error::Fingerprint { .. } => 4,
            Error::MissingArtifact(_) => 5,
            _ => 1,
        }
    }
}
