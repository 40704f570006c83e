//! Restoration of corrupted digit images with a convolutional encoder and a
//! direct-attention LSTM decoder, plus a convolutional encoder-decoder
//! baseline for comparison.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod training;

pub use autograd::{grad_check, grad_check_steps, Graph, Gradients, Var};
pub use tensor::{Precision, Scalar, Tensor, TensorError};
