//! Harness errors with process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration or command-line arguments (exit code 1).
    #[error("configuration error: {0}")]
    Config(String),

    /// Unreadable or inconsistent data files (exit code 2).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical or conditioning failure during modeling (exit code 3).
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }

    /// Classifies a core-library error raised while modeling.
    pub fn from_core(e: tensor_gp::Error) -> Self {
        match e {
            tensor_gp::Error::Conditioning(m) | tensor_gp::Error::Initialization(m) => {
                HarnessError::Numerical(m)
            }
            other => HarnessError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
