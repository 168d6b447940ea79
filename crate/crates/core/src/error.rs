use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    Rejected(String),

    #[error("non-finite value in {what} at batch index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("non-finite loss at step {step}: {losses}")]
    Diverged { step: u64, losses: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Nn(#[from] semfill_nn::NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn rejected(msg: impl Into<String>) -> Error {
    Error::Rejected(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
