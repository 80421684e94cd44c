//! Text and JSON renderings of a finished run. Both derive from the same
//! [`RunSummary`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ata_core::metrics::{compute_improvement, IterationMetrics};
use ata_core::model::AgentRole;
use ata_core::orchestrator::{LoopReport, TerminationReason};
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Percent change from iteration 1 to the final iteration. `None` when the
/// baseline is zero and the change is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub coverage: Option<f64>,
    pub failure_rate: Option<f64>,
    pub invalid_tests: Option<f64>,
    pub runtime_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub run_id: String,
    pub termination_reason: TerminationReason,
    pub converged: bool,
    pub iterations_executed: u32,
    pub iterations: Vec<IterationMetrics>,
    pub improvement: Improvement,
    pub agent_invocation_totals: BTreeMap<AgentRole, u32>,
}

fn delta(first: f64, last: f64) -> Option<f64> {
    if first == last {
        return Some(0.0);
    }
    compute_improvement(first, last).ok()
}

pub fn improvement(history: &[IterationMetrics]) -> Improvement {
    let (Some(a), Some(b)) = (history.first(), history.last()) else {
        return Improvement {
            coverage: None,
            failure_rate: None,
            invalid_tests: None,
            runtime_s: None,
        };
    };
    Improvement {
        coverage: delta(a.coverage, b.coverage),
        failure_rate: delta(a.failure_rate, b.failure_rate),
        invalid_tests: delta(f64::from(a.non_pass()), f64::from(b.non_pass())),
        runtime_s: delta(a.runtime_s, b.runtime_s),
    }
}

pub fn summarize(report: &LoopReport) -> RunSummary {
    RunSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: report.run_id.clone(),
        termination_reason: report.termination_reason,
        converged: report.converged,
        iterations_executed: report.iterations_executed,
        iterations: report.metrics_history.clone(),
        improvement: improvement(&report.metrics_history),
        agent_invocation_totals: report.agent_invocation_totals.clone(),
    }
}

pub fn render_json(s: &RunSummary) -> String {
    serde_json::to_string_pretty(s).expect("summary serializes")
}

pub fn parse_json(text: &str) -> Result<RunSummary, serde_json::Error> {
    serde_json::from_str(text)
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:+.1}%"),
        None => "n/a".into(),
    }
}

pub fn render_text(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {}", s.run_id);
    let _ = writeln!(
        out,
        "{:>4}  {:>8}  {:>8}  {:>9}  {:>7}  {:>5}  {:>9}",
        "iter", "coverage", "branch", "fail_rate", "invalid", "tests", "runtime_s"
    );
    for m in &s.iterations {
        let branch = m.branch_coverage.map_or_else(|| "-".to_string(), |b| format!("{b:.4}"));
        let _ = writeln!(
            out,
            "{:>4}  {:>8.4}  {:>8}  {:>9.4}  {:>7}  {:>5}  {:>9.3}",
            m.iteration,
            m.coverage,
            branch,
            m.failure_rate,
            m.non_pass(),
            m.counts.total_tests,
            m.runtime_s
        );
    }
    if let (Some(a), Some(b)) = (s.iterations.first(), s.iterations.last()) {
        let _ = writeln!(
            out,
            "change {} -> {}: coverage {}, failure rate {}, invalid tests {}, runtime {}",
            a.iteration,
            b.iteration,
            pct(s.improvement.coverage),
            pct(s.improvement.failure_rate),
            pct(s.improvement.invalid_tests),
            pct(s.improvement.runtime_s)
        );
    }
    let _ = writeln!(
        out,
        "{:?} after {} iteration(s)",
        s.termination_reason, s.iterations_executed
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ata_core::metrics::IterationCounts;

    fn m(i: u32, c: f64, f: f64, t: f64) -> IterationMetrics {
        IterationMetrics {
            iteration: i,
            coverage: c,
            branch_coverage: None,
            failure_rate: f,
            runtime_s: t,
            counts: IterationCounts::default(),
        }
    }

    #[test]
    fn coverage_delta_rounds_to_one_decimal() {
        let imp = improvement(&[m(1, 0.724, 0.2, 1.0), m(2, 0.948, 0.1, 1.0)]);
        assert_eq!(imp.coverage, Some(30.9));
        assert_eq!(imp.runtime_s, Some(0.0));
    }

    #[test]
    fn single_iteration_deltas_are_zero() {
        let imp = improvement(&[m(1, 0.5, 0.0, 2.0)]);
        assert_eq!(
            imp,
            Improvement {
                coverage: Some(0.0),
                failure_rate: Some(0.0),
                invalid_tests: Some(0.0),
                runtime_s: Some(0.0)
            }
        );
    }

    #[test]
    fn zero_baseline_is_undefined() {
        let imp = improvement(&[m(1, 0.0, 0.0, 1.0), m(2, 0.5, 0.1, 1.0)]);
        assert_eq!(imp.coverage, None);
        assert_eq!(imp.failure_rate, None);
    }
}
