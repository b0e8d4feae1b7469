//! Error types shared across the library.

use thiserror::Error;

/// Errors produced by tensor indexing, kernel evaluation, and GP inference.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A voxel coordinate or flat index fell outside the grid.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Inputs with incompatible shapes or lengths were combined.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A hyperparameter or configuration value violated its constraints.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix factorization failed or fell below its conditioning floor.
    #[error("conditioning failure: {0}")]
    Conditioning(String),

    /// Optimizer initialization produced a non-finite objective.
    #[error("initialization failure: {0}")]
    Initialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
