use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient check precondition failed: {0}")]
    GradCheck(String),

    #[error("similarity undefined: {0}")]
    Similarity(String),

    #[error("load error in {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("batching error: {0}")]
    Batching(String),

    #[error("optimizer step aborted: non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
