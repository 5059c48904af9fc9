use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown nationality `{0}`")]
    UnknownNationality(String),

    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{what} length {len} exceeds maximum {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },

    #[error("classifier needs at least two labels, got {0}")]
    SingleLabel(usize),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("fingerprint mismatch for {artifact}: expected {expected}, found {found}")]
    FingerprintMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
