use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("record {record}: {reason}")]
    Record { record: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for `{attribute}` (cardinality {cardinality})")]
    IndexOutOfRange {
        attribute: String,
        index: usize,
        cardinality: usize,
    },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("schema hash mismatch: expected {expected}, found {found}")]
    SchemaHashMismatch { expected: String, found: String },

    #[error("non-finite loss for attribute `{attribute}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        attribute: String,
        epoch: usize,
        step: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corrupt file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
