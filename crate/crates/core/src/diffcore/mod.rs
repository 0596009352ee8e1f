//! Reverse-mode differentiation, optimisation and sampling primitives.

mod adam;
mod gradcheck;
mod gumbel;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments};
pub use gradcheck::{grad_check, grad_check_scaled};
pub use gumbel::{gumbel_noise, gumbel_softmax, relaxed_softmax};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} data values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}
