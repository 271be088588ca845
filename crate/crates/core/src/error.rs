use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav file {path}: {detail}")]
    WavFormat { path: PathBuf, detail: String },

    #[error("wav file {path} contains no audio samples")]
    EmptyAudio { path: PathBuf },

    #[error("manifest {path}, line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("duplicate utterance id {0:?}")]
    DuplicateUttId(String),

    #[error("duplicate trial pair ({0:?}, {1:?})")]
    DuplicateTrial(String, String),

    #[error("binary container {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty result: {0}")]
    Empty(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn container(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Container {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
