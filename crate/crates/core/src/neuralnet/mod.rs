//! Small from-scratch CNN kernel: tensors, layers, forward and backward
//! passes, binary cross-entropy and finite-difference gradient checking.

mod gradcheck;
mod layers;
mod network;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckConfig, GradCheckReport};
pub use layers::{
    activation, bce_loss, conv2d, conv2d_backward, dense, dense_backward, maxpool2,
    maxpool2_backward, Activation, Conv2dGrads, DenseGrads, BCE_EPSILON,
};
pub use network::{ActivationPattern, ForwardCache, Gradients, Layer, LayerKind, Network, INPUT_SHAPE};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation cache does not belong to this network: {0}")]
    StaleCache(String),
}
