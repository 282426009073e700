//! Command-level errors carrying their exit code class.

use thiserror::Error;

/// Exit code 0 is success, 1 a usage/config problem, 2 a runtime failure.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid config/checkpoint, missing
    /// input files. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Failures after validation: divergence, write errors mid-run. Exit
    /// code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
