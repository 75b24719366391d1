//! Dense rank-5 tensors, 3D kernels, and reverse-mode differentiation.

mod dense;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod shape;
mod tape;

pub use dense::Tensor;
pub use gradcheck::grad_check;
pub use kernels::UpsampleMode;
pub use scalar::Scalar;
pub use shape::Shape;
pub use tape::{backward, Gradients, Tape, Var};
