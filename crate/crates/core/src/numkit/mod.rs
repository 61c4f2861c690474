//! Dense `f64` kernels, activations, seeded randomness and a finite-difference
//! gradient checker.

mod gradcheck;
mod matrix;
mod ops;
mod rng;

pub use gradcheck::grad_check;
pub(crate) use matrix::parse_f64;
pub use matrix::{format_f64, Matrix};
pub use ops::{leaky_relu, leaky_relu_grad, softmax_backward, softmax_rows};
pub use rng::Rng;
