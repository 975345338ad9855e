//! Dense tensors, tape-based reverse-mode differentiation, Adam, and a
//! finite-difference gradient oracle.

mod adam;
mod fd;
pub(crate) mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use fd::{finite_difference_gradient, relative_error};
pub use scalar::Scalar;
pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
