//! The surrogate network: a ReLU multilayer perceptron trained on MSE with Adam.

mod adam;
mod mlp;
mod normalize;
mod schedule;

use std::fmt::Debug;

use ndarray::LinalgScalar;
use num_traits::Float;
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{mse_loss, Batch, Gradients, Mlp};
pub use normalize::Normalizer;
pub use schedule::{scheduled_lr, LrSchedule};

/// Five normalized temperatures plus normalized time.
pub const INPUT_WIDTH: usize = 6;

/// Floating-point type the network can be instantiated with.
pub trait Scalar:
    LinalgScalar + Float + std::ops::AddAssign + ndarray::ScalarOperand + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} (first bad index {index}, value {value})")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("empty batch")]
    EmptyBatch,
}
