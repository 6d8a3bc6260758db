use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CirlError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CirlError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CirlError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CirlError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CirlError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CirlError>;
