//! CLI error taxonomy mapped to process exit codes.
//!
//! 1 — usage and configuration problems (bad flags, unreadable config files,
//!     template errors, missing credentials);
//! 2 — data validation failures (malformed datasets/schemas, digest or id
//!     mismatches, gold-label problems);
//! 3 — backend failure budget exceeded while labeling.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn usage(message: impl ToString) -> Self {
        CliError::Usage(message.to_string())
    }

    pub fn validation(message: impl ToString) -> Self {
        CliError::Validation(message.to_string())
    }

    pub fn backend(message: impl ToString) -> Self {
        CliError::Backend(message.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
