use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic at byte offset {offset}: expected {expected:?}")]
    BadMagic { offset: u64, expected: &'static str },

    #[error("truncated file at byte offset {offset} while reading image {image_id}")]
    Truncated { image_id: u32, offset: u64 },

    #[error("truncated file at byte offset {offset} while reading {what}")]
    TruncatedHeader { what: &'static str, offset: u64 },

    #[error("non-finite value at byte offset {offset} in image {image_id}")]
    NonFinite { image_id: u32, offset: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid index: {0}")]
    InvalidIndex(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("posting list {list} is not sorted or has duplicates at position {position}")]
    UnsortedPostings { list: usize, position: usize },

    #[error("signature width mismatch: {0} vs {1} bits")]
    WidthMismatch(u32, u32),

    #[error("{0}")]
    Invalid(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
