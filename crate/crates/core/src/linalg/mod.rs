//! Dense linear algebra: the matrix type and plain factorizations.

pub mod dense;
mod matrix;

pub use dense::{cholesky_jittered, cholesky_strict, solve_lower, JITTER_LEVELS};
pub use matrix::{matmul_t, Matrix};
