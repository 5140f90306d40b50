//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum McdError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shapes {a:?} and {b:?} are not broadcastable in {context}")]
    BroadcastError {
        context: String,
        a: Vec<usize>,
        b: Vec<usize>,
    },

    #[error("invalid geometry in {context}: {detail}")]
    InvalidGeometry { context: String, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("{context}: value {value} is not a binary label")]
    NonBinaryLabel { context: String, value: f64 },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite {what} in {context}")]
    NonFinite { context: String, what: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: String, detail: String },

    #[error("{0}")]
    Invalid(String),
}

impl McdError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        McdError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, McdError>;
