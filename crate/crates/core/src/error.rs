use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing split file {0}")]
    MissingSplit(PathBuf),

    #[error("overlapping triggers: {0}")]
    OverlappingTriggers(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("document shorter than filter (tokens {tokens}, width {width})")]
    DocumentTooShort { tokens: usize, width: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("model has no untied output layer; run fine-tune initialization first")]
    MissingUntiedLayer,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no exemplar database loaded")]
    NoDatabase,

    #[error("exemplar database is empty")]
    EmptyDatabase,

    #[error("no exemplars available for label {0}")]
    NoExemplars(usize),

    #[error("artifact hash mismatch: {what} expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unknown label code {0:?}")]
    UnknownLabel(String),

    #[error("unknown document {0:?}")]
    UnknownDocument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
