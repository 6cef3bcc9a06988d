//! Minimal reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks it
//! in reverse to accumulate gradients into every trainable leaf. The element
//! type is generic over [`Scalar`] so the same model code runs in `f32` for
//! training and `f64` for finite-difference checks.

mod array;
mod error;
pub mod gradcheck;
mod scalar;
mod tape;

pub use array::Tensor;
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{softmax_in_place, Tape, Value};
