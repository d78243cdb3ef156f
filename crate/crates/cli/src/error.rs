//! CLI error type with the exit-code contract: 0 success, 2 config
//! error, 3 stage failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn config_from(e: mergeguard::Error) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        CliError::Stage { stage: stage.to_string(), message: e.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }
}
