use lenctl_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("corpus line {line}: field `{field}`: {message}")]
    Corpus {
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model: {0}")]
    Model(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
