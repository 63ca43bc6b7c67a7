//! Differentiable operations, implemented as methods on [`Var`](crate::Var).

pub mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

pub use conv::Conv2dSpec;
pub use elementwise::broadcast_shape;
pub use shape::concat;
