//! Crate-wide error type with the exit-code classes the CLI exposes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DhalError {
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    Shape { expected: Vec<usize>, got: Vec<usize>, context: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure in {component}: {detail}")]
    Numerical { component: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DhalError {
    pub fn shape(expected: &[usize], got: &[usize], context: &str) -> Self {
        DhalError::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
            context: context.to_string(),
        }
    }

    /// CLI exit code class: 2 usage/config, 3 data/shape, 4 numerical, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            DhalError::Config(_) => 2,
            DhalError::Shape { .. } | DhalError::Data(_) => 3,
            DhalError::Numerical { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, DhalError>;
