//! A small reverse-mode automatic differentiation engine.
//!
//! Values live in dense row-major [`Tensor`]s. Operations on [`Var`] handles
//! are recorded on a [`Tape`]; [`Tape::backward`] returns [`Gradients`] for
//! every leaf created with [`Tape::variable`]. Everything runs on the calling
//! thread with a fixed summation order, so repeated runs are bit-identical.

pub mod gradcheck;
mod kernels;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{broadcast_shape, concat, Conv2dSpec};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
