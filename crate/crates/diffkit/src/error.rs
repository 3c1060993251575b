use thiserror::Error;

/// Contract violations raised by tensor construction and graph primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("tensor rank {0} exceeds the supported maximum of 3")]
    RankTooLarge(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: String },
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
