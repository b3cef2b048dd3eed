//! Library behind the `mialab` binary: configuration, pipeline stages,
//! and report rendering, exposed as functions so tests can drive full
//! runs in-process.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;
pub mod runner;

/// Failure classes mapped to process exit codes: configuration problems
/// exit 1, pipeline-stage failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn config(message: impl Into<String>) -> CliError {
        CliError::Config(message.into())
    }

    pub fn stage(stage: impl Into<String>, message: impl std::fmt::Display) -> CliError {
        CliError::Stage { stage: stage.into(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Stage { .. } => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage { stage, message } => write!(f, "stage `{stage}` failed: {message}"),
        }
    }
}

impl std::error::Error for CliError {}
