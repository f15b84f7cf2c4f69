//! Minimal reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! Design: a [`Tensor`] is a cheap handle around an immutable value buffer,
//! optionally attached to a [`Tape`]. Operations on plain tensors evaluate
//! eagerly; as soon as one operand lives on a tape the result is recorded
//! so [`Tensor::backward`] can replay the graph in reverse. One tape per
//! optimization step, dropped afterwards — parameters persist as plain
//! tensors between steps.
//!
//! Shape discipline is strict: binary ops require equal shapes, with the
//! single exception of a one-element operand which broadcasts (its gradient
//! is the sum of the elementwise gradients). There is no general
//! broadcasting.

mod ops;
mod tape;
mod tensor;

pub mod fdcheck;

pub use tape::{GradError, Tape};
pub use tensor::{Affine2, Tensor};
