use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("joint `{joint}` value {value:.6} outside limits [{lower:.6}, {upper:.6}]")]
    LimitViolation { joint: String, value: f64, lower: f64, upper: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no hand point projects in front of the camera")]
    NoHandVisible,

    #[error("empty pixel rectangle")]
    EmptyRect,

    #[error("object `{0}` not found in scene")]
    NotFound(String),

    #[error("object `{0}` is fully occluded")]
    Occluded(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("target unreachable (best residual {position:.4} m, {rotation:.4} rad)")]
    Unreachable { position: f64, rotation: f64 },

    #[error("goal configuration in collision")]
    GoalInCollision,

    #[error("start configuration in collision")]
    StartInCollision,

    #[error("planning failed after {samples} samples")]
    PlanningFailed { samples: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("policy parameters are untrained")]
    Untrained,

    #[error("non-finite loss at step {step}: loss {loss}, grad norm {grad_norm}")]
    NonFinite { step: usize, loss: f64, grad_norm: f64 },

    #[error("sample set is empty")]
    EmptySamples,

    #[error("no pending chunk covers step {0}")]
    NoCoveringChunk(usize),

    #[error("demonstration rejected: {0}")]
    DemoRejected(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("{}: {message} (byte offset {offset})", path.display())]
    Format { path: PathBuf, offset: u64, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), offset, message: message.into() }
    }

    /// Converts a toml deserialization error into a line-numbered parse error.
    pub(crate) fn from_toml(src: &str, err: &toml::de::Error) -> Self {
        let line = err.span().map(|s| line_of(src, s.start)).unwrap_or(0);
        Error::Parse { line, message: err.message().to_string() }
    }
}

/// 1-based line number of a byte offset.
pub(crate) fn line_of(src: &str, offset: usize) -> usize {
    src.as_bytes()[..offset.min(src.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

pub type Result<T> = std::result::Result<T, Error>;
