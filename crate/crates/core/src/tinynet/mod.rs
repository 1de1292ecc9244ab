//! Minimal dense convolution engine, generic over the floating-point scalar.
//!
//! Everything here is linear (no normalization, identity activations), which is all
//! the verification needs: gradients, receptive fields and gradient support of the
//! multi-rate dilated block.

mod analysis;
mod conv;
mod module;
mod tensor;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

pub use analysis::{
    finite_difference_check, finite_difference_input, gradient_support, receptive_field_analytic,
    relative_error, GradCheck, SupportMask, REL_ERR_FLOOR,
};
pub use conv::{ConvGrads, ConvLayer};
pub use module::{Block, ConvChain, DilatedModule, Shortcut, MODULE_DILATIONS};
pub use tensor::Tensor;

/// Scalar types the engine runs on.
pub trait Scalar: Float + FromPrimitive + Debug + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Send + Sync + 'static {}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TinyError {
    #[error("expected {expected} input channels, found {found}")]
    Channels { expected: usize, found: usize },
    #[error("expected shape {expected:?}, found {found:?}")]
    Shape {
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("expected {expected} values, found {found}")]
    Length { expected: usize, found: usize },
    #[error("tensor values must be finite")]
    NonFinite,
    #[error("invalid kernel: {0}")]
    Kernel(String),
    #[error("channels {channels} not divisible by {divisor}")]
    Indivisible { channels: usize, divisor: usize },
    #[error("receptive window of {extent} around ({row}, {col}) crosses the {height}x{width} input border")]
    Border {
        extent: usize,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("empty layer chain")]
    EmptyChain,
}
