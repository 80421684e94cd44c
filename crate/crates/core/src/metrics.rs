//! Per-iteration metrics, loop termination policy and improvement arithmetic.
//!
//! Every function here is pure.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CoverageMap, ExecutionOutcome, TestId, TestSuite, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("outcome references test {0} which is not in the suite")]
    UnknownTest(TestId),
    #[error("convergence check needs at least one iteration of history")]
    EmptyHistory,
    #[error("improvement is undefined for a zero baseline")]
    ZeroBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergencePolicy {
    #[serde(default = "default_coverage_threshold")]
    pub coverage_threshold: f64,
    /// Maximum tolerated failure rate.
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    /// Optional ceiling on suite wall-clock runtime, seconds.
    #[serde(default)]
    pub runtime_budget_s: Option<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
}

fn default_coverage_threshold() -> f64 {
    0.95
}
fn default_failure_threshold() -> f64 {
    0.02
}
fn default_max_iterations() -> u32 {
    8
}

impl Default for ConvergencePolicy {
    fn default() -> Self {
        ConvergencePolicy {
            coverage_threshold: default_coverage_threshold(),
            failure_threshold: default_failure_threshold(),
            runtime_budget_s: None,
            max_iterations: default_max_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyViolation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Reports every broken invariant, not just the first.
pub fn validate_policy(policy: &ConvergencePolicy) -> Result<(), Vec<PolicyViolation>> {
    let mut violations = Vec::new();
    let mut fraction = |field: &'static str, v: f64| {
        if !(0.0..=1.0).contains(&v) {
            violations.push(PolicyViolation {
                field,
                message: format!("threshold out of [0,1]: {v}"),
            });
        }
    };
    fraction("coverage_threshold", policy.coverage_threshold);
    fraction("failure_threshold", policy.failure_threshold);
    if let Some(tau) = policy.runtime_budget_s {
        if !(tau >= 0.0) || !tau.is_finite() {
            violations.push(PolicyViolation {
                field: "runtime_budget_s",
                message: format!("runtime budget must be a non-negative number of seconds: {tau}"),
            });
        }
    }
    if policy.max_iterations < 1 {
        violations.push(PolicyViolation {
            field: "max_iterations",
            message: "max_iterations must be at least 1".into(),
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Blend of coverage gap (`alpha`) and operator-declared risk (`beta`) used
/// to rank target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_alpha() -> f64 {
    0.7
}
fn default_beta() -> f64 {
    0.3
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: default_alpha(),
            beta: default_beta(),
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), Vec<PolicyViolation>> {
        let mut v = Vec::new();
        if !(self.alpha >= 0.0) {
            v.push(PolicyViolation {
                field: "alpha",
                message: format!("weight must be >= 0: {}", self.alpha),
            });
        }
        if !(self.beta >= 0.0) {
            v.push(PolicyViolation {
                field: "beta",
                message: format!("weight must be >= 0: {}", self.beta),
            });
        }
        if !(self.alpha + self.beta > 0.0) {
            v.push(PolicyViolation {
                field: "alpha+beta",
                message: "at least one weight must be positive".into(),
            });
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub total_tests: u32,
    pub passing: u32,
    pub failing: u32,
    /// Error and Timeout verdicts.
    pub erroring: u32,
    #[serde(default)]
    pub skipped: u32,
    pub agent_invocations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u32,
    /// Statement coverage fraction.
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_coverage: Option<f64>,
    pub failure_rate: f64,
    /// Suite wall-clock runtime, seconds.
    pub runtime_s: f64,
    pub counts: IterationCounts,
}

impl IterationMetrics {
    pub fn non_pass(&self) -> u32 {
        self.counts.failing + self.counts.erroring
    }
}

/// Tallies one iteration. Error and Timeout count as failures; Skipped
/// tests are excluded from the denominator. A suite with nothing executed
/// gets a failure rate of 1.0 so it can never converge.
pub fn compute_metrics(
    iteration: u32,
    suite: &TestSuite,
    outcomes: &[ExecutionOutcome],
    coverage: &CoverageMap,
    wall_time_s: f64,
) -> Result<IterationMetrics, MetricsError> {
    let ids: HashSet<&TestId> = suite.tests.iter().map(|t| &t.id).collect();
    let mut counts = IterationCounts {
        total_tests: suite.tests.len() as u32,
        ..Default::default()
    };
    for o in outcomes {
        if !ids.contains(&o.test_id) {
            return Err(MetricsError::UnknownTest(o.test_id.clone()));
        }
        match o.verdict {
            Verdict::Pass => counts.passing += 1,
            Verdict::Fail => counts.failing += 1,
            Verdict::Error | Verdict::Timeout => counts.erroring += 1,
            Verdict::Skipped => counts.skipped += 1,
        }
    }
    let executed = counts.passing + counts.failing + counts.erroring;
    let failure_rate = if executed == 0 {
        1.0
    } else {
        f64::from(counts.failing + counts.erroring) / f64::from(executed)
    };
    Ok(IterationMetrics {
        iteration,
        coverage: coverage.statement_fraction(),
        branch_coverage: coverage.branch_fraction(),
        failure_rate,
        runtime_s: wall_time_s.max(0.0),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConvergenceDecision {
    Converged,
    Continue,
    Exhausted,
}

/// Inclusive thresholds on the latest iteration. The runtime budget only
/// participates when set.
pub fn meets_thresholds(m: &IterationMetrics, policy: &ConvergencePolicy) -> bool {
    m.coverage >= policy.coverage_threshold
        && m.failure_rate <= policy.failure_threshold
        && policy.runtime_budget_s.is_none_or(|tau| m.runtime_s <= tau)
}

pub fn check_convergence(
    history: &[IterationMetrics],
    policy: &ConvergencePolicy,
) -> Result<ConvergenceDecision, MetricsError> {
    let latest = history.last().ok_or(MetricsError::EmptyHistory)?;
    if meets_thresholds(latest, policy) {
        Ok(ConvergenceDecision::Converged)
    } else if history.len() as u64 >= u64::from(policy.max_iterations) {
        Ok(ConvergenceDecision::Exhausted)
    } else {
        Ok(ConvergenceDecision::Continue)
    }
}

/// Signed percent change from `baseline` to `final_value`, rounded to one
/// decimal, half away from zero.
pub fn compute_improvement(baseline: f64, final_value: f64) -> Result<f64, MetricsError> {
    if baseline == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    let pct = (final_value - baseline) / baseline * 100.0;
    // Nudge by a few ulps so values like 30.95 that land just under the
    // midpoint in binary still round away from zero.
    let scaled = pct * 10.0;
    let nudged = scaled + scaled.signum() * scaled.abs() * 4.0 * f64::EPSILON;
    let rounded = nudged.round() / 10.0;
    Ok(if rounded == 0.0 { 0.0 } else { rounded })
}
