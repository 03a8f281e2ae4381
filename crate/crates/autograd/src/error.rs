use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, got {got:?} (expected {expected})")]
    Shape {
        op: &'static str,
        got: Vec<Vec<usize>>,
        expected: String,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, got: &[&[usize]], expected: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            got: got.iter().map(|s| s.to_vec()).collect(),
            expected: expected.into(),
        }
    }
}
