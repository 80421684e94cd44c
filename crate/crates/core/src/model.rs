//! Domain types shared by every agent: tests, suites, execution outcomes,
//! classified failures and coverage.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("coverage estimate {0} is outside [0, 1]")]
    EstimateOutOfRange(f64),
    #[error("traceability field `{0}` is empty")]
    MissingProvenance(&'static str),
    #[error("duplicate test id {0} in suite")]
    DuplicateTest(TestId),
    #[error("unit `{unit}` covers {covered} statements but declares only {total}")]
    CoverageOverflow { unit: String, covered: u64, total: u64 },
    #[error("unit `{unit}` covers {covered} branches but declares only {total}")]
    BranchOverflow { unit: String, covered: u64, total: u64 },
}

/// Content hash of a test's source text, lowercase hex SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestId(String);

impl TestId {
    pub fn of_source(source_text: &str) -> Self {
        TestId(hex::encode(Sha256::digest(source_text.as_bytes())))
    }

    /// Wraps an id reported by a runner. No hashing is performed.
    pub fn from_hex(hex: impl Into<String>) -> Self {
        TestId(hex.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..self.0.len().min(12)]
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Orchestrator,
    Generation,
    Execution,
    Review,
}

impl AgentRole {
    pub const ALL: [AgentRole; 4] = [
        AgentRole::Orchestrator,
        AgentRole::Generation,
        AgentRole::Execution,
        AgentRole::Review,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Orchestrator => "orchestrator",
            AgentRole::Generation => "generation",
            AgentRole::Execution => "execution",
            AgentRole::Review => "review",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetadata {
    pub target_module: String,
    #[serde(default)]
    pub mock_dependencies: Vec<String>,
    pub coverage_estimate: f64,
    pub origin_agent: AgentRole,
    pub rationale: String,
    pub timestamp: DateTime<Utc>,
    pub iteration_created: u32,
    /// Id of the test this one was patched or regenerated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<TestId>,
    /// Backend-specific pointer to what the test was rendered from,
    /// e.g. `unit::callable#2` for manifest examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatus {
    Fresh,
    Passing,
    Failing,
    Quarantined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: TestId,
    pub target_unit: String,
    pub source_text: String,
    pub metadata: TestMetadata,
    pub status: TestStatus,
}

impl TestCase {
    pub fn new(target_unit: impl Into<String>, source_text: impl Into<String>, metadata: TestMetadata) -> Self {
        let source_text = source_text.into();
        TestCase {
            id: TestId::of_source(&source_text),
            target_unit: target_unit.into(),
            source_text,
            metadata,
            status: TestStatus::Fresh,
        }
    }

    /// Checks the id/content binding and the traceability fields.
    pub fn validate(&self) -> Result<(), ModelError> {
        let m = &self.metadata;
        if !(0.0..=1.0).contains(&m.coverage_estimate) {
            return Err(ModelError::EstimateOutOfRange(m.coverage_estimate));
        }
        if m.rationale.trim().is_empty() {
            return Err(ModelError::MissingProvenance("rationale"));
        }
        if m.target_module.trim().is_empty() {
            return Err(ModelError::MissingProvenance("target_module"));
        }
        Ok(())
    }

    pub fn has_provenance(&self) -> bool {
        !self.metadata.origin_agent.as_str().is_empty()
            && !self.metadata.rationale.trim().is_empty()
            && self.metadata.timestamp.timestamp() != 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub tests: Vec<TestCase>,
    pub project_ref: String,
    pub iteration: u32,
}

impl TestSuite {
    pub fn new(project_ref: impl Into<String>, iteration: u32) -> Self {
        TestSuite {
            tests: Vec::new(),
            project_ref: project_ref.into(),
            iteration,
        }
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    pub fn contains(&self, id: &TestId) -> bool {
        self.tests.iter().any(|t| &t.id == id)
    }

    pub fn get(&self, id: &TestId) -> Option<&TestCase> {
        self.tests.iter().find(|t| &t.id == id)
    }

    /// Appends `test` unless a test with the same id is already present.
    /// Returns whether the test was added.
    pub fn push_unique(&mut self, test: TestCase) -> bool {
        if self.contains(&test.id) {
            return false;
        }
        self.tests.push(test);
        true
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = HashSet::new();
        for t in &self.tests {
            if !seen.insert(&t.id) {
                return Err(ModelError::DuplicateTest(t.id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
    Timeout,
    Skipped,
}

impl Verdict {
    /// Fail, Error and Timeout all count against the suite.
    pub fn is_failure(self) -> bool {
        matches!(self, Verdict::Fail | Verdict::Error | Verdict::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Collect,
    Setup,
    Call,
    Teardown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub test_id: TestId,
    pub verdict: Verdict,
    pub duration_s: f64,
    pub phase: Phase,
    #[serde(default)]
    pub raw_message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureClass {
    Syntax,
    Environment,
    LogicAssertion,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceLocation {
    pub unit: String,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSignal {
    pub message: String,
    /// `None` when the diagnostic carries no recognizable location.
    pub location: Option<SourceLocation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub test_id: TestId,
    pub failure_class: FailureClass,
    pub signal: FailureSignal,
    pub hypothesis: String,
    pub repeat_count: u32,
}

/// Statement ids are source line numbers within the unit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitCoverage {
    pub total_statements: u64,
    pub covered_statements: BTreeSet<u32>,
    /// Statements the report names as not executed. When absent the unit's
    /// statements are taken to be numbered `1..=total_statements`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_statements: Option<BTreeSet<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_branches: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered_branches: Option<u64>,
}

impl UnitCoverage {
    pub fn new(total_statements: u64) -> Self {
        UnitCoverage {
            total_statements,
            ..Default::default()
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.total_statements == 0 {
            return 0.0;
        }
        (self.covered_statements.len() as f64 / self.total_statements as f64).min(1.0)
    }

    pub fn uncovered(&self) -> BTreeSet<u32> {
        match &self.missing_statements {
            Some(missing) => missing.difference(&self.covered_statements).copied().collect(),
            None => (1..=self.total_statements.min(u32::MAX as u64) as u32)
                .filter(|s| !self.covered_statements.contains(s))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoverageMap {
    pub units: BTreeMap<String, UnitCoverage>,
}

impl CoverageMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn insert(&mut self, unit: impl Into<String>, cov: UnitCoverage) {
        self.units.insert(unit.into(), cov);
    }

    pub fn unit(&self, name: &str) -> Option<&UnitCoverage> {
        self.units.get(name)
    }

    pub fn total_statements(&self) -> u64 {
        self.units.values().map(|u| u.total_statements).sum()
    }

    pub fn covered_statements(&self) -> u64 {
        self.units.values().map(|u| u.covered_statements.len() as u64).sum()
    }

    /// Overall statement coverage; 0 when nothing is declared.
    pub fn statement_fraction(&self) -> f64 {
        let total = self.total_statements();
        if total == 0 {
            return 0.0;
        }
        (self.covered_statements() as f64 / total as f64).min(1.0)
    }

    /// Overall branch coverage over the units that report branches.
    pub fn branch_fraction(&self) -> Option<f64> {
        let mut total = 0u64;
        let mut covered = 0u64;
        let mut any = false;
        for u in self.units.values() {
            if let (Some(t), Some(c)) = (u.total_branches, u.covered_branches) {
                any = true;
                total += t;
                covered += c;
            }
        }
        match (any, total) {
            (false, _) => None,
            (true, 0) => Some(0.0),
            (true, t) => Some(covered as f64 / t as f64),
        }
    }

    /// Per unit uncovered statement ids, omitting fully covered units.
    pub fn gaps(&self) -> BTreeMap<String, BTreeSet<u32>> {
        self.units
            .iter()
            .filter_map(|(name, u)| {
                let gap = u.uncovered();
                (!gap.is_empty()).then(|| (name.clone(), gap))
            })
            .collect()
    }

    /// Merges another map into this one: covered sets are unioned, totals
    /// take the maximum declared value.
    pub fn merge(&mut self, other: &CoverageMap) {
        for (name, theirs) in &other.units {
            let ours = self.units.entry(name.clone()).or_default();
            ours.total_statements = ours.total_statements.max(theirs.total_statements);
            ours.covered_statements.extend(theirs.covered_statements.iter().copied());
            match (&mut ours.missing_statements, &theirs.missing_statements) {
                (Some(a), Some(b)) => a.extend(b.iter().copied()),
                (slot @ None, Some(b)) => *slot = Some(b.clone()),
                _ => {}
            }
            ours.total_branches = max_opt(ours.total_branches, theirs.total_branches);
            ours.covered_branches = max_opt(ours.covered_branches, theirs.covered_branches);
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (unit, u) in &self.units {
            let covered = u.covered_statements.len() as u64;
            if covered > u.total_statements {
                return Err(ModelError::CoverageOverflow {
                    unit: unit.clone(),
                    covered,
                    total: u.total_statements,
                });
            }
            if let (Some(total), Some(covered)) = (u.total_branches, u.covered_branches) {
                if covered > total {
                    return Err(ModelError::BranchOverflow {
                        unit: unit.clone(),
                        covered,
                        total,
                    });
                }
            }
        }
        Ok(())
    }
}

fn max_opt(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TestMetadata {
        TestMetadata {
            target_module: "calc".into(),
            mock_dependencies: vec![],
            coverage_estimate: 0.5,
            origin_agent: AgentRole::Generation,
            rationale: "example".into(),
            timestamp: Utc::now(),
            iteration_created: 1,
            lineage: None,
            source_ref: None,
        }
    }

    #[test]
    fn id_depends_only_on_source_text() {
        let a = TestCase::new("calc", "assert add(1, 2) == 3", meta());
        let mut m = meta();
        m.rationale = "different".into();
        let b = TestCase::new("other", "assert add(1, 2) == 3", m);
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, TestCase::new("calc", "assert add(1, 2) == 4", meta()).id);
        assert_eq!(a.id.as_str().len(), 64);
    }

    #[test]
    fn suite_rejects_duplicate_ids() {
        let mut suite = TestSuite::new("p", 1);
        assert!(suite.push_unique(TestCase::new("u", "x", meta())));
        assert!(!suite.push_unique(TestCase::new("u", "x", meta())));
        suite.tests.push(TestCase::new("u", "x", meta()));
        assert!(matches!(suite.validate(), Err(ModelError::DuplicateTest(_))));
    }

    #[test]
    fn uncovered_uses_missing_set_when_reported() {
        let mut u = UnitCoverage::new(4);
        u.covered_statements = [3, 7].into();
        u.missing_statements = Some([9, 12].into());
        assert_eq!(u.uncovered(), [9, 12].into());

        let mut v = UnitCoverage::new(4);
        v.covered_statements = [1, 3].into();
        assert_eq!(v.uncovered(), [2, 4].into());
    }

    #[test]
    fn coverage_overflow_is_rejected() {
        let mut map = CoverageMap::new();
        let mut u = UnitCoverage::new(1);
        u.covered_statements = [1, 2].into();
        map.insert("u", u);
        assert!(matches!(map.validate(), Err(ModelError::CoverageOverflow { .. })));
    }

    #[test]
    fn merge_unions_covered_sets() {
        let mut a = CoverageMap::new();
        let mut ua = UnitCoverage::new(10);
        ua.covered_statements = [1, 2].into();
        a.insert("u", ua);
        let mut b = CoverageMap::new();
        let mut ub = UnitCoverage::new(10);
        ub.covered_statements = [2, 3].into();
        ub.total_branches = Some(4);
        ub.covered_branches = Some(1);
        b.insert("u", ub);
        b.insert("w", UnitCoverage::new(5));
        a.merge(&b);
        assert_eq!(a.unit("u").unwrap().covered_statements, [1, 2, 3].into());
        assert_eq!(a.total_statements(), 15);
        assert_eq!(a.branch_fraction(), Some(0.25));
    }
}
