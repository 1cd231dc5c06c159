//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, {lhs} vs {rhs}")]
    DimMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("node set must contain at least one node")]
    EmptyNodeSet,

    #[error("zero-norm vector: {context}")]
    ZeroNorm { context: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("video {id}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        num_classes: usize,
    },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("{path}: malformed at offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint missing tensor {key}")]
    MissingTensor { key: String },
}

impl Error {
    /// An I/O failure tagged with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    /// True for errors caused by unreadable or inconsistent input data, as
    /// opposed to bad configuration or a numeric failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Io { .. }
                | Error::EmptyCorpus(_)
                | Error::LabelOutOfRange { .. }
                | Error::MissingTensor { .. }
                | Error::ZeroNorm { .. }
                | Error::DimMismatch { .. }
        )
    }
}
