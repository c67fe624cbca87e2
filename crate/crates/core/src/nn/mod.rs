//! Minimal neural-network kernel: tensors, layers, losses, Adam and
//! gradient checking.
//!
//! Everything is generic over [`Real`] so the same layer code runs in f32
//! for training and in f64 for finite-difference gradient checks.

mod gradcheck;
mod layers;
mod losses;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_embedding, GradCheckReport};
pub use layers::{
    BatchNorm, Conv2d, ConvTranspose2d, Dense, Dropout, Embedding, Layer, LeakyRelu, Relu,
    Sigmoid, Softmax, Tanh,
};
pub use losses::{
    bce_loss, binary_accuracy, class_accuracy, scce_loss, sigmoid_bce_grad, softmax_scce_grad,
};
pub use optim::{adam_step, AdamConfig};
pub use tensor::{Param, Real, Tensor};

use thiserror::Error;

/// Errors surfaced by tensor and layer operations.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("embedding id {id} out of range (vocabulary size {vocab})")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("batch normalization needs a batch of at least 2 in training mode, got {0}")]
    DegenerateBatch(usize),
    #[error("dropout rate must be in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("stride must be >= 1")]
    InvalidStride,
    #[error("non-finite gradient in parameter update")]
    NonFiniteGradient,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}
