use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("log received non-positive value {0}")]
    DomainError(f64),

    #[error("axis {axis} is out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("backward needs a scalar loss of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),

    #[error("the tape has no recorded nodes")]
    EmptyTape,

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
}
