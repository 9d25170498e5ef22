use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape {0:?} has a zero or missing extent")]
    EmptyShape(Vec<usize>),

    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("loss node {node} has shape {shape:?}; backward needs a scalar")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("graph has no parameter store attached")]
    NoStore,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
