//! Gaussian process regression for voxelized tensor inputs.

pub mod bspline;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod metric;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
