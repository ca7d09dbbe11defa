use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    Shape {
        op: String,
        expected: String,
        got: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {got}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },
    #[error("backprop requested for a node that was not produced by a forward pass on this tape")]
    NoForward,
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &str, expected: impl Into<String>, got: &[usize]) -> NumError {
    NumError::Shape {
        op: op.to_string(),
        expected: expected.into(),
        got: got.to_vec(),
    }
}
