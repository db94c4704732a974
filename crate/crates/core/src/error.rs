use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("finite-difference oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (batch items {batch:?})")]
    NonFinite { step: usize, batch: Vec<usize> },

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}
