//! Three-way failure taxonomy.
//!
//! Decision table, first matching row wins:
//!
//! | row | condition                                                        | class          |
//! |-----|------------------------------------------------------------------|----------------|
//! | a   | Error in collect, or message matches a `syntax` pattern          | Syntax         |
//! | b   | Error in setup, message matches an `environment` pattern, or Timeout | Environment |
//! | c   | Fail in call with a message matching an `assertion` pattern      | LogicAssertion |
//! | d   | anything else                                                    | Environment    |
//!
//! Pattern tables are data (see `data/patterns/*.yaml`), one per target
//! ecosystem.

use std::path::Path;

use regex::{Regex, RegexSet};
use serde::Deserialize;
use thiserror::Error;

use crate::model::{ExecutionOutcome, FailureClass, FailureRecord, FailureSignal, Phase, SourceLocation, Verdict};

pub const PYTHON_PATTERNS: &str = include_str!("../../data/patterns/python.yaml");

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("verdict {0:?} is not a failure and cannot be classified")]
    NotAFailure(Verdict),
    #[error("invalid pattern table: {0}")]
    Patterns(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternTable {
    pub ecosystem: String,
    #[serde(default)]
    pub syntax: Vec<String>,
    #[serde(default)]
    pub environment: Vec<String>,
    #[serde(default)]
    pub assertion: Vec<String>,
    #[serde(default)]
    pub value_mismatch: Vec<String>,
    /// Regexes with named groups `unit` and `line`.
    #[serde(default)]
    pub location: Vec<String>,
}

impl PatternTable {
    pub fn from_yaml(text: &str) -> Result<Self, ClassifyError> {
        serde_yaml::from_str(text).map_err(|e| ClassifyError::Patterns(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ClassifyError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClassifyError::Patterns(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }
}

/// Which classification rule fired. Kept alongside the class for trace output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    CollectOrSyntax,
    SetupEnvironmentOrTimeout,
    CallAssertion,
    Fallback,
}

#[derive(Debug, Clone)]
pub struct FailureClassifier {
    ecosystem: String,
    syntax: RegexSet,
    environment: RegexSet,
    assertion: RegexSet,
    value_mismatch: RegexSet,
    location: Vec<Regex>,
}

fn set(patterns: &[String]) -> Result<RegexSet, ClassifyError> {
    RegexSet::new(patterns).map_err(|e| ClassifyError::Patterns(e.to_string()))
}

impl FailureClassifier {
    pub fn new(table: &PatternTable) -> Result<Self, ClassifyError> {
        let location = table
            .location
            .iter()
            .map(|p| {
                let re = Regex::new(p).map_err(|e| ClassifyError::Patterns(e.to_string()))?;
                if re.capture_names().flatten().filter(|n| *n == "unit" || *n == "line").count() != 2 {
                    return Err(ClassifyError::Patterns(format!(
                        "location pattern `{p}` needs named groups `unit` and `line`"
                    )));
                }
                Ok(re)
            })
            .collect::<Result<_, _>>()?;
        Ok(FailureClassifier {
            ecosystem: table.ecosystem.clone(),
            syntax: set(&table.syntax)?,
            environment: set(&table.environment)?,
            assertion: set(&table.assertion)?,
            value_mismatch: set(&table.value_mismatch)?,
            location,
        })
    }

    pub fn python() -> Self {
        let table = PatternTable::from_yaml(PYTHON_PATTERNS).expect("bundled python patterns parse");
        Self::new(&table).expect("bundled python patterns compile")
    }

    pub fn ecosystem(&self) -> &str {
        &self.ecosystem
    }

    pub fn rule(&self, outcome: &ExecutionOutcome) -> Result<(FailureClass, Rule), ClassifyError> {
        let msg = outcome.raw_message.as_str();
        let v = outcome.verdict;
        if !v.is_failure() {
            return Err(ClassifyError::NotAFailure(v));
        }
        if (v == Verdict::Error && outcome.phase == Phase::Collect) || self.syntax.is_match(msg) {
            return Ok((FailureClass::Syntax, Rule::CollectOrSyntax));
        }
        if (v == Verdict::Error && outcome.phase == Phase::Setup) || self.environment.is_match(msg) || v == Verdict::Timeout {
            return Ok((FailureClass::Environment, Rule::SetupEnvironmentOrTimeout));
        }
        if v == Verdict::Fail && outcome.phase == Phase::Call && self.assertion.is_match(msg) {
            return Ok((FailureClass::LogicAssertion, Rule::CallAssertion));
        }
        Ok((FailureClass::Environment, Rule::Fallback))
    }

    pub fn classify(&self, outcome: &ExecutionOutcome, repeat_count: u32) -> Result<FailureRecord, ClassifyError> {
        let (class, rule) = self.rule(outcome)?;
        let hypothesis = match (class, rule) {
            (FailureClass::Syntax, _) => "test source does not parse or collect",
            (FailureClass::Environment, Rule::SetupEnvironmentOrTimeout) if outcome.verdict == Verdict::Timeout => {
                "test exceeded its time budget"
            }
            (FailureClass::Environment, Rule::Fallback) => "unrecognized failure; treated as environmental",
            (FailureClass::Environment, _) => "missing dependency or environment setup problem",
            (FailureClass::LogicAssertion, _) => "assertion does not hold against the unit under test",
        };
        Ok(FailureRecord {
            test_id: outcome.test_id.clone(),
            failure_class: class,
            signal: FailureSignal {
                message: outcome.raw_message.clone(),
                location: self.locate(&outcome.raw_message),
            },
            hypothesis: hypothesis.to_string(),
            repeat_count: repeat_count.max(1),
        })
    }

    /// First location match across the configured patterns. When several
    /// frames match, the last one (innermost) is reported.
    pub fn locate(&self, message: &str) -> Option<SourceLocation> {
        self.location.iter().find_map(|re| {
            re.captures_iter(message).last().and_then(|c| {
                Some(SourceLocation {
                    unit: c.name("unit")?.as_str().to_string(),
                    line: c.name("line")?.as_str().parse().ok()?,
                })
            })
        })
    }

    pub fn is_value_mismatch(&self, message: &str) -> bool {
        self.value_mismatch.is_match(message)
    }
}
