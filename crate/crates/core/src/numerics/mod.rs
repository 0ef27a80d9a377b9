//! Dense `f64` tensors, tape-based reverse-mode differentiation,
//! deterministic random streams and the finite-difference gradient oracle.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_rel_error, rel_error};
pub use graph::{Bound, Graph, Var};
pub use params::ParamSet;
pub use rng::{mix, RngStream};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
