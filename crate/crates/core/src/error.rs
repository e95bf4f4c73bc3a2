use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KpxError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KpxError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("batch norm on an empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer} has no points left after subsampling (element {element})")]
    Degenerate { layer: usize, element: usize },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KpxError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        KpxError::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        KpxError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
