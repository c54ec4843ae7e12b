use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("optimizer state not initialized")]
    UninitializedOptimizer,

    #[error("activation cache is stale or missing: {0}")]
    StaleCache(String),

    #[error("insufficient points: {0}")]
    InsufficientPoints(String),

    #[error("head for task {0} does not exist")]
    MissingHead(usize),

    #[error("head for task {0} is frozen")]
    FrozenHead(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("incomplete history: {0}")]
    IncompleteHistory(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} more bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user-supplied input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidArgument(_)
                | Error::InsufficientPoints(_)
                | Error::LabelOutOfRange { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
