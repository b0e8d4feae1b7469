//! Benchmark harness for the tensor-gp regression engine: dataset IO,
//! experiment orchestration, synthetic data generation, and result
//! reporting.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod sampling;
pub mod stats;

pub use error::{HarnessError, Result};
