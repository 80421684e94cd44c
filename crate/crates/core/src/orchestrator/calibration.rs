//! Operator calibration through a control document polled at iteration
//! boundaries.
//!
//! ```yaml
//! note: loosen the failure budget for flaky infra
//! weights: {alpha: 0.5, beta: 0.5}
//! policy: {failure_threshold: 0.05}
//! stop: false
//! ```
//!
//! An applied document is renamed to `<path>.applied-<iteration>`; a
//! rejected one to `<path>.rejected-<iteration>`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{validate_policy, ConvergencePolicy, RewardWeights};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverride {
    pub coverage_threshold: Option<f64>,
    pub failure_threshold: Option<f64>,
    pub runtime_budget_s: Option<f64>,
    pub max_iterations: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOverride {
    #[serde(default)]
    pub weights: Option<RewardWeights>,
    #[serde(default)]
    pub policy: Option<PolicyOverride>,
    #[serde(default)]
    pub note: String,
    /// Ends the run at this boundary.
    #[serde(default)]
    pub stop: bool,
}

impl CalibrationOverride {
    /// The policy and weights that would result, or every violation.
    pub fn resolve(
        &self,
        policy: &ConvergencePolicy,
        weights: &RewardWeights,
    ) -> Result<(ConvergencePolicy, RewardWeights), Vec<String>> {
        let mut p = policy.clone();
        if let Some(o) = &self.policy {
            if let Some(v) = o.coverage_threshold {
                p.coverage_threshold = v;
            }
            if let Some(v) = o.failure_threshold {
                p.failure_threshold = v;
            }
            if let Some(v) = o.runtime_budget_s {
                p.runtime_budget_s = Some(v);
            }
            if let Some(v) = o.max_iterations {
                p.max_iterations = v;
            }
        }
        let w = self.weights.unwrap_or(*weights);
        let mut errors: Vec<String> = Vec::new();
        if let Err(v) = validate_policy(&p) {
            errors.extend(v.iter().map(|e| e.to_string()));
        }
        if let Err(v) = w.validate() {
            errors.extend(v.iter().map(|e| e.to_string()));
        }
        if errors.is_empty() {
            Ok((p, w))
        } else {
            Err(errors)
        }
    }
}

pub enum Polled {
    Absent,
    Found(CalibrationOverride),
    Unreadable(String),
}

pub fn poll(path: &Path) -> Polled {
    if !path.exists() {
        return Polled::Absent;
    }
    match std::fs::read_to_string(path) {
        Ok(text) => match serde_yaml::from_str::<CalibrationOverride>(&text) {
            Ok(o) => Polled::Found(o),
            Err(e) => Polled::Unreadable(e.to_string()),
        },
        Err(e) => Polled::Unreadable(e.to_string()),
    }
}

pub fn archive(path: &Path, iteration: u32, applied: bool) -> std::io::Result<PathBuf> {
    let tag = if applied { "applied" } else { "rejected" };
    let mut name = path.as_os_str().to_owned();
    name.push(format!(".{tag}-{iteration}"));
    let dest = PathBuf::from(name);
    std::fs::rename(path, &dest)?;
    Ok(dest)
}
