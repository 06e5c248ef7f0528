use std::path::PathBuf;

use crate::bridging::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("sequence of {needed} tokens exceeds context length {context}")]
    ContextOverflow { needed: usize, context: usize },

    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("byte {byte:#04x} is not in the vocabulary alphabet")]
    UnknownByte { byte: u8 },

    #[error("target sequence is empty")]
    EmptyTarget,

    #[error("{0} must not be empty")]
    EmptySequence(&'static str),

    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective requires hyperparameter `{0}`")]
    MissingHyperparameter(&'static str),

    #[error("record {index} has no diff annotations")]
    MissingDiff { index: usize },

    #[error("invalid diff annotation: {0}")]
    InvalidDiff(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("unknown mode `{0}`")]
    UnknownMode(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
