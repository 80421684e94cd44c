//! Operator surface for the refinement engine: configuration, commands,
//! reports and CI exit codes.

pub mod commands;
pub mod config;
pub mod report;

use ata_core::orchestrator::{FailureKind, LoopReport, TerminationReason};
use thiserror::Error;

pub use config::{load_config, ConfigError, RunConfig};

/// Process exit codes.
///
/// | code | meaning                          |
/// |------|----------------------------------|
/// | 0    | converged / command succeeded    |
/// | 1    | operational error                |
/// | 2    | exhausted / replay mismatch      |
/// | 3    | invalid configuration or input   |
/// | 4    | sandbox unavailable              |
/// | 5    | stopped by operator              |
pub mod exit {
    pub const OK: i32 = 0;
    pub const OPERATIONAL: i32 = 1;
    pub const EXHAUSTED: i32 = 2;
    pub const INVALID_CONFIG: i32 = 3;
    pub const SANDBOX: i32 = 4;
    pub const OPERATOR_STOP: i32 = 5;
}

pub fn exit_code_for(report: &LoopReport) -> i32 {
    match report.termination_reason {
        TerminationReason::Converged => exit::OK,
        TerminationReason::Exhausted => exit::EXHAUSTED,
        TerminationReason::OperatorStop => exit::OPERATOR_STOP,
        TerminationReason::Error => match report.failure.as_ref().map(|f| f.kind) {
            Some(FailureKind::Sandbox) => exit::SANDBOX,
            _ => exit::OPERATIONAL,
        },
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("sandbox unavailable: {0}")]
    Sandbox(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::NotFound(_) => exit::INVALID_CONFIG,
            CliError::Sandbox(_) => exit::SANDBOX,
            CliError::Other(_) => exit::OPERATIONAL,
        }
    }
}
