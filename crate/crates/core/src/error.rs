use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("annotation line {line}: {msg}")]
    Annotation { line: usize, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("json error: {0}")]
    Json(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("attack not applicable: {0}")]
    AttackInapplicable(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
