use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("graph schema error: {0}")]
    Schema(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("persistence error ({path}): {reason}")]
    Persistence { path: PathBuf, reason: String },

    #[error("checkpoint version mismatch in {path}: found `{found}`, expected `{expected}`")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("non-finite {what} encountered during {during}")]
    NonFinite { what: &'static str, during: String },

    #[error("Cohen's kappa is undefined: chance agreement is 1 but observed agreement is {observed}")]
    UndefinedKappa { observed: f64 },

    #[error("{0}")]
    MissingStage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn persistence(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Persistence {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
