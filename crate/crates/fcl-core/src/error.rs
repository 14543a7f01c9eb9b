use thiserror::Error;

/// Errors surfaced by the numeric core and the training pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward root is not recorded on this tape")]
    RootNotOnTape,

    #[error("backward was already called for this root; each root owns one gradient channel")]
    RootAlreadyUsed,

    #[error("tensor belongs to a different tape")]
    TapeMismatch,

    #[error("invalid reduction over shape {shape:?}: {detail}")]
    InvalidAxes { shape: Vec<usize>, detail: String },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
