use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("degenerate prediction: {0}")]
    DegeneratePrediction(String),

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("resolution too small: got {height}x{width}, minimum is {min_height}x{min_width}")]
    ResolutionTooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("non-finite gradient at iteration {iteration} for parameter `{param}` (norm {norm})")]
    NonFiniteGradient {
        iteration: usize,
        param: String,
        norm: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse errors in {path}:\n{report}")]
    Parse { path: PathBuf, report: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::StageOrder(_) => ErrorKind::Usage,
            Error::NonFiniteGradient { .. } | Error::Numerical(_) | Error::DegeneratePrediction(_) => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Data,
        }
    }
}
