use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("document is empty after normalization")]
    EmptyDocument,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("invalid span at line {line} for document {doc_id}: {message}")]
    InvalidSpan { doc_id: String, line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of {len} tokens exceeds the encoder limit of {max}; chunk the document first")]
    TooLong { len: usize, max: usize },

    #[error("shape mismatch for tensor {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("index was built with encoder {index}, but the query encoder is {query}")]
    FingerprintMismatch { index: String, query: String },

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable short label for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyDocument => "empty_document",
            Error::EmptyCorpus => "empty_corpus",
            Error::Parse { .. } => "parse",
            Error::InvalidSpan { .. } => "invalid_span",
            Error::Config(_) => "config",
            Error::TooLong { .. } => "too_long",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::UnknownId(_) => "unknown_id",
            Error::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
