//! Deep kernel processes with inverse Wishart layers on Gram matrices.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod prior;
pub mod seeding;
pub mod special;
pub mod training;

pub use error::{DkpError, Result};
pub use linalg::Matrix;
