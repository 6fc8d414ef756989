//! Small dense-network numerics: tensors, fully connected stacks with
//! hand-written reverse-mode gradients, a central-difference oracle, and Adam.

mod adam;
mod dense;
mod grad_check;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use dense::{init_net, Activation, DenseLayer, DenseNet, ForwardCache, LayerGradient, NetCheckpoint, NetGradients};
pub use grad_check::{finite_diff_grad, relative_errors, GradCheckSummary};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("tensor contains non-finite entries")]
    NonFinite,
    #[error("cache does not belong to this network state")]
    StaleCache,
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
}

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> NnError {
    NnError::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
