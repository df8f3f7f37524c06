use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: {detail}")]
    InvalidOperands { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn operands(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::InvalidOperands { op, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor {index} does not belong to this tape")]
    Detached { index: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
