use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("gradient check failed at parameter {param}, element {element}: {detail}")]
    GradCheck {
        param: usize,
        element: usize,
        detail: String,
    },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("prototype store: {0}")]
    Prototype(String),

    #[error("invalid {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("IDX file {path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("phase {phase}: {source}")]
    Phase {
        phase: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("file is empty")]
    Empty,

    #[error("bad magic {found:#010x} (expected {expected})")]
    BadMagic { found: u32, expected: &'static str },

    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dimension {0} is zero")]
    ZeroDimension(usize),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_phase(self, phase: usize) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through phase context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            e => e,
        }
    }
}
