use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Convenience constructor for [`TensorError::InvalidArg`].
pub fn invalid_arg(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArg {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArg {
        op,
        msg: msg.into(),
    }
}
