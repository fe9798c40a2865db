//! Dense matrices, the seeded generator and the finite-difference checker
//! that every other module's tests lean on.

mod gradcheck;
mod matrix;
mod rng;
pub mod special;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{derive_seed, gaussian, Rng};
