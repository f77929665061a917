use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("manifest error: missing tensors {missing:?}, unexpected tensors {extra:?}, shape mismatches {mismatched:?}")]
    Manifest {
        missing: Vec<String>,
        extra: Vec<String>,
        mismatched: Vec<String>,
    },

    #[error("checkpoint format version mismatch: archive has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("tokenizer: word `{0}` is not in the vocabulary")]
    UnknownWord(String),

    #[error("training diverged at step {step}: non-finite loss on sample `{sample_id}`")]
    NonFiniteLoss { step: usize, sample_id: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
