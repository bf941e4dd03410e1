use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("model config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("dwa: {0}")]
    Dwa(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("multilingual: {0}")]
    Multilingual(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn op(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidOp {
            op,
            msg: msg.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidOp { .. } => "op",
            Error::NonFinite(_) => "non_finite",
            Error::Autograd(_) => "autograd",
            Error::Optimizer(_) => "optimizer",
            Error::Tokenizer(_) => "tokenizer",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Dwa(_) => "dwa",
            Error::Metrics(_) => "metrics",
            Error::Multilingual(_) => "multilingual",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
