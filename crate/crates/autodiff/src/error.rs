use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),

    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite activation at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("graph is empty")]
    EmptyGraph,

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("seed gradient shape {got:?} does not match output shape {expected:?}")]
    SeedShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
}
