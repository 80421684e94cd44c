//! Test generation agent.
//!
//! Backends implement [`GenerationAgent`]: the deterministic
//! [`TemplateGenerator`] renders manifest examples, [`RemoteGenerator`] asks
//! an HTTP chat-completion endpoint, and the synthetic harness provides a
//! third for hermetic runs.

pub mod manifest;
pub mod remote;
pub mod template;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{CallableEntry, ExamplePair, Expectation, InterfaceManifest, UnitEntry};
pub use remote::{RemoteConfig, RemoteGenerator};
pub use template::{render_test, TemplateGenerator, TestTemplate};

use crate::model::{AgentRole, FailureRecord, ModelError, TestCase, TestId};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("manifest declares no callables")]
    EmptyManifest,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("template: {0}")]
    Template(String),
    #[error("render: {0}")]
    Render(String),
    #[error("generation budget must be at least 1")]
    Budget,
    #[error(transparent)]
    Validation(#[from] ModelError),
    #[error("no source to repair `{0}` from")]
    UnknownSource(String),
    #[error("remote backend failed after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },
    #[error("remote backend configuration: {0}")]
    Config(String),
    #[error("generation cancelled")]
    Cancelled,
}

/// What the generator should focus on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub coverage_gaps: BTreeMap<String, BTreeSet<u32>>,
    /// Memory record ids retrieved for this request.
    pub retrieved: Vec<String>,
    /// Text of the retrieved records, used as few-shot context.
    #[serde(default)]
    pub retrieved_snippets: Vec<String>,
    /// Units ordered by non-increasing weight.
    pub targets: Vec<(String, f64)>,
}

impl GenerationContext {
    pub fn is_ordered(&self) -> bool {
        self.targets.windows(2).all(|w| w[0].1 >= w[1].1)
    }
}

pub struct GenerationRequest<'a> {
    pub project_ref: &'a str,
    pub iteration: u32,
    pub context: &'a GenerationContext,
    pub budget: usize,
    pub seed: u64,
    pub now: DateTime<Utc>,
    /// Tests already in the suite or retired; never emitted again.
    pub exclude_ids: &'a HashSet<TestId>,
    /// Backend source references already used or retired.
    pub exclude_refs: &'a HashSet<String>,
    /// Only generate for units named in `context.targets`.
    pub targets_only: bool,
}

pub struct RepairRequest<'a> {
    pub test: &'a TestCase,
    pub rationale: &'a str,
    pub context_refs: &'a [String],
    pub context_snippets: &'a [String],
    pub failure: Option<&'a FailureRecord>,
    pub iteration: u32,
    pub now: DateTime<Utc>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutput {
    pub tests: Vec<TestCase>,
    /// Malformed candidates, kept for inspection but never executed.
    pub quarantined: Vec<TestCase>,
    /// Ids suppressed because an identical test already exists.
    pub duplicates: Vec<TestId>,
}

pub trait GenerationAgent: Send + Sync {
    fn generate_tests(&self, req: &GenerationRequest<'_>) -> Result<GenerationOutput, GenerationError>;
    /// Repair a failing test in place of its assertion or declarations.
    fn patch(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError>;
    /// Produce a replacement for a test that could not be collected.
    fn regenerate(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError>;
}

/// Fills the provenance fields. Metadata is not hashed, so the id is
/// unchanged.
pub fn annotate_metadata(
    mut test: TestCase,
    origin: AgentRole,
    rationale: &str,
    estimate: f64,
    now: DateTime<Utc>,
) -> Result<TestCase, GenerationError> {
    if !(0.0..=1.0).contains(&estimate) {
        return Err(ModelError::EstimateOutOfRange(estimate).into());
    }
    if rationale.trim().is_empty() {
        return Err(ModelError::MissingProvenance("rationale").into());
    }
    test.metadata.origin_agent = origin;
    test.metadata.rationale = rationale.to_string();
    test.metadata.coverage_estimate = estimate;
    test.metadata.timestamp = now;
    if test.metadata.target_module.trim().is_empty() {
        test.metadata.target_module = test.target_unit.clone();
    }
    Ok(test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TestMetadata;
    use chrono::TimeZone;

    fn blank() -> TestCase {
        TestCase::new(
            "u",
            "assert f() == 1",
            TestMetadata {
                target_module: String::new(),
                mock_dependencies: vec![],
                coverage_estimate: 0.0,
                origin_agent: AgentRole::Generation,
                rationale: String::new(),
                timestamp: Utc.timestamp_opt(1, 0).unwrap(),
                iteration_created: 1,
                lineage: None,
                source_ref: None,
            },
        )
    }

    #[test]
    fn annotate_boundaries() {
        let now = Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap();
        let t = annotate_metadata(blank(), AgentRole::Generation, "r", 0.0, now).unwrap();
        assert_eq!(t.metadata.coverage_estimate, 0.0);
        assert_eq!(t.metadata.target_module, "u");
        assert_eq!(t.id, blank().id);
        assert!(matches!(
            annotate_metadata(blank(), AgentRole::Generation, "r", 1.01, now),
            Err(GenerationError::Validation(ModelError::EstimateOutOfRange(_)))
        ));
        assert!(annotate_metadata(blank(), AgentRole::Generation, " ", 0.5, now).is_err());
    }

    #[test]
    fn annotate_is_idempotent() {
        let now = Utc.with_ymd_and_hms(2026, 3, 1, 0, 0, 0).unwrap();
        let once = annotate_metadata(blank(), AgentRole::Review, "why", 0.4, now).unwrap();
        let twice = annotate_metadata(once.clone(), AgentRole::Review, "why", 0.4, now).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn context_ordering_check() {
        let ctx = GenerationContext {
            targets: vec![("a".into(), 0.9), ("b".into(), 0.9), ("c".into(), 0.1)],
            ..Default::default()
        };
        assert!(ctx.is_ordered());
        let bad = GenerationContext {
            targets: vec![("a".into(), 0.1), ("b".into(), 0.9)],
            ..Default::default()
        };
        assert!(!bad.is_ordered());
    }
}
