//! Execution & analysis agent: runs suites, ingests results and coverage,
//! classifies failures.

pub mod classify;
pub mod coverage;
pub mod protocol;
pub mod sandbox;

use std::path::PathBuf;

use thiserror::Error;

pub use classify::{FailureClassifier, PatternTable};
pub use coverage::{parse_coverage, CoverageFormat, NativeCoverage};
pub use protocol::{parse_result_document, RunnerResultDocument};
pub use sandbox::{SandboxConfig, SubprocessExecutor};

use crate::model::{CoverageMap, ExecutionOutcome, TestSuite};

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("sandbox unavailable: {0}")]
    Sandbox(String),
    #[error("runner exited without writing {0}")]
    MissingDocument(PathBuf),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    CoverageReport(#[from] coverage::CoverageError),
    #[error("coverage report unreadable: {0}")]
    Coverage(String),
    #[error("runner reported unknown test id `{0}`")]
    UnknownTest(String),
    #[error("invalid sandbox configuration: {0}")]
    Config(String),
}

impl ExecutionError {
    /// Worth one retry: the runner started but its output was unusable.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ExecutionError::MissingDocument(_) | ExecutionError::Protocol(_) | ExecutionError::Coverage(_)
        )
    }

    pub fn is_sandbox_failure(&self) -> bool {
        matches!(self, ExecutionError::Sandbox(_) | ExecutionError::Config(_))
    }
}

#[derive(Debug, Clone)]
pub struct ExecutionReport {
    /// Exactly one outcome per suite test, in suite order.
    pub outcomes: Vec<ExecutionOutcome>,
    pub coverage: CoverageMap,
    pub wall_time_s: f64,
    /// Result document as received (merged across shards).
    pub document: RunnerResultDocument,
}

pub trait ExecutionAgent: Send + Sync {
    fn execute_suite(&self, suite: &TestSuite) -> Result<ExecutionReport, ExecutionError>;
}
