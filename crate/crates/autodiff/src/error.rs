use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: input outside the domain ({msg})")]
    Domain { op: &'static str, msg: String },

    #[error("gradient output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable {0} does not require gradients")]
    NotDifferentiable(usize),

    #[error("variable {0} is unreachable from the output")]
    Unreachable(usize),

    #[error("array data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
