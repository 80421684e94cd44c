//! Run configuration file.
//!
//! | key                 | default                              |
//! |---------------------|--------------------------------------|
//! | `backend`           | `template`                           |
//! | `project`           | required unless `backend: synthetic` |
//! | `manifest`          | required unless `backend: synthetic` |
//! | `scenario`          | required when `backend: synthetic`   |
//! | `template`          | built-in pytest template             |
//! | `remote`            | required when `backend: remote`      |
//! | `policy`            | coverage 0.95, failure 0.02, max 8   |
//! | `weights`           | alpha 0.7, beta 0.3                  |
//! | `risk_map`          | none (every unit r = 0)              |
//! | `repair`            | discard after 3, 3 context records   |
//! | `sandbox`           | required unless `backend: synthetic` |
//! | `memory`            | W 3, N 512, d 256                    |
//! | `seed`              | 0                                    |
//! | `initial_budget`    | 32                                   |
//! | `gap_fill_budget`   | 4                                    |
//! | `full_regeneration` | false                                |
//! | `trace`             | `<state>/runs/<run_id>/trace.jsonl`  |
//! | `control`           | none                                 |
//!
//! Relative paths resolve against the directory holding the file. The
//! remote credential is read from `ATA_LLM_API_KEY` only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ata_core::execution::SandboxConfig;
use ata_core::generation::RemoteConfig;
use ata_core::metrics::{validate_policy, ConvergencePolicy, RewardWeights};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid configuration:\n  - {}", .errors.join("\n  - "))]
pub struct ConfigError {
    pub errors: Vec<String>,
}

impl ConfigError {
    pub fn one(msg: impl Into<String>) -> Self {
        ConfigError { errors: vec![msg.into()] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Template,
    Remote,
    Synthetic,
}

fn default_discard_after() -> u32 {
    3
}
fn default_context_k() -> usize {
    3
}
fn default_citation() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairSection {
    #[serde(default = "default_discard_after")]
    pub discard_after: u32,
    #[serde(default = "default_context_k")]
    pub context_k: usize,
    #[serde(default = "default_citation")]
    pub citation_similarity: f64,
}

impl Default for RepairSection {
    fn default() -> Self {
        RepairSection {
            discard_after: default_discard_after(),
            context_k: default_context_k(),
            citation_similarity: default_citation(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSection {
    /// Defaults to `<state>/runs/<run_id>/sandbox`.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub per_test_timeout_s: Option<f64>,
    #[serde(default)]
    pub suite_timeout_s: Option<f64>,
    #[serde(default)]
    pub env_allowlist: Option<Vec<String>>,
    #[serde(default)]
    pub max_parallel: Option<usize>,
    #[serde(default)]
    pub test_file_extension: Option<String>,
}

impl SandboxSection {
    pub fn resolve(&self, default_workdir: &Path, project: Option<&Path>) -> SandboxConfig {
        let mut c = SandboxConfig::new(
            self.workdir.clone().unwrap_or_else(|| default_workdir.to_path_buf()),
            self.command.clone(),
        );
        c.project_dir = project.map(Path::to_path_buf);
        if let Some(v) = self.per_test_timeout_s {
            c.per_test_timeout_s = v;
        }
        if let Some(v) = self.suite_timeout_s {
            c.suite_timeout_s = v;
        }
        if let Some(v) = &self.env_allowlist {
            c.env_allowlist = v.clone();
        }
        if let Some(v) = self.max_parallel {
            c.max_parallel = v;
        }
        if let Some(v) = &self.test_file_extension {
            c.test_file_extension = v.clone();
        }
        c
    }
}

fn default_window() -> u32 {
    3
}
fn default_max_records() -> usize {
    512
}
fn default_dimension() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default = "default_window")]
    pub window_iterations: u32,
    #[serde(default = "default_max_records")]
    pub max_records: usize,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            window_iterations: default_window(),
            max_records: default_max_records(),
            dimension: default_dimension(),
        }
    }
}

fn default_initial_budget() -> usize {
    32
}
fn default_gap_fill() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub project: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    #[serde(default)]
    pub policy: ConvergencePolicy,
    #[serde(default)]
    pub weights: RewardWeights,
    #[serde(default)]
    pub risk_map: Option<PathBuf>,
    #[serde(default)]
    pub repair: RepairSection,
    #[serde(default)]
    pub sandbox: Option<SandboxSection>,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_initial_budget")]
    pub initial_budget: usize,
    #[serde(default = "default_gap_fill")]
    pub gap_fill_budget: usize,
    #[serde(default)]
    pub full_regeneration: bool,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub control: Option<PathBuf>,
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_yaml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c: RunConfig = serde_yaml::from_str(text).map_err(|e| ConfigError::one(e.to_string()))?;
        for p in [
            &mut c.project,
            &mut c.manifest,
            &mut c.scenario,
            &mut c.template,
            &mut c.risk_map,
            &mut c.trace,
            &mut c.control,
        ] {
            absolutize(base, p);
        }
        if let Some(s) = &mut c.sandbox {
            absolutize(base, &mut s.workdir);
        }
        Ok(c)
    }

    /// Every problem with the configuration, not only the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut e: Vec<String> = Vec::new();
        let must_exist = |e: &mut Vec<String>, key: &str, p: &Option<PathBuf>, required: bool| match p {
            Some(p) if !p.exists() => e.push(format!("{key}: {} does not exist", p.display())),
            None if required => e.push(format!("missing required key `{key}` for backend {:?}", self.backend)),
            _ => {}
        };
        let real = self.backend != Backend::Synthetic;
        must_exist(&mut e, "project", &self.project, real);
        must_exist(&mut e, "manifest", &self.manifest, real);
        must_exist(&mut e, "scenario", &self.scenario, !real);
        must_exist(&mut e, "template", &self.template, false);
        must_exist(&mut e, "risk_map", &self.risk_map, false);
        if self.backend == Backend::Remote {
            match &self.remote {
                None => e.push("missing required key `remote` for backend Remote".into()),
                Some(r) if r.endpoint.trim().is_empty() => e.push("remote.endpoint is empty".into()),
                Some(r) if r.timeout_s.is_nan() || r.timeout_s <= 0.0 => e.push("remote.timeout_s must be > 0".into()),
                _ => {}
            }
        }
        if real {
            match &self.sandbox {
                None => e.push(format!("missing required key `sandbox` for backend {:?}", self.backend)),
                Some(s) => {
                    if let Err(v) = s.resolve(Path::new("."), None).validate() {
                        e.extend(v.into_iter().map(|m| format!("sandbox: {m}")));
                    }
                }
            }
        }
        if let Err(v) = validate_policy(&self.policy) {
            e.extend(v.iter().map(|p| p.to_string()));
        }
        if let Err(v) = self.weights.validate() {
            e.extend(v.iter().map(|p| p.to_string()));
        }
        if let Some(p) = &self.risk_map {
            if p.exists() {
                if let Err(msg) = load_risk_map(p) {
                    e.push(msg);
                }
            }
        }
        if self.repair.discard_after < 1 {
            e.push("repair.discard_after must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.repair.citation_similarity) {
            e.push("repair.citation_similarity must be in [0, 1]".into());
        }
        if self.memory.window_iterations < 1 || self.memory.max_records < 1 {
            e.push("memory.window_iterations and memory.max_records must be at least 1".into());
        }
        if self.memory.dimension < 1 {
            e.push("memory.dimension must be at least 1".into());
        }
        if self.initial_budget < 1 {
            e.push("initial_budget must be at least 1".into());
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { errors: e })
        }
    }

    pub fn risk(&self) -> Result<BTreeMap<String, f64>, ConfigError> {
        match &self.risk_map {
            Some(p) => load_risk_map(p).map_err(ConfigError::one),
            None => Ok(BTreeMap::new()),
        }
    }
}

/// A mapping of unit name to risk in [0, 1].
pub fn load_risk_map(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("risk_map {}: {e}", path.display()))?;
    let map: BTreeMap<String, f64> =
        serde_yaml::from_str(&text).map_err(|e| format!("risk_map {}: {e}", path.display()))?;
    if let Some((u, r)) = map.iter().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
        return Err(format!("risk_map: unit `{u}` has risk {r} outside [0, 1]"));
    }
    Ok(map)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| ConfigError::one(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    let c = RunConfig::from_yaml(&text, &base)?;
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_template_config_gets_defaults() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir(d.path().join("proj")).unwrap();
        write(d.path(), "m.yaml", "schema_version: 1\nunits: []\n");
        let p = write(
            d.path(),
            "c.yaml",
            "project: proj\nmanifest: m.yaml\nsandbox: {command: [runner]}\n",
        );
        let c = load_config(&p).unwrap();
        assert_eq!(c.policy.coverage_threshold, 0.95);
        assert_eq!(c.policy.failure_threshold, 0.02);
        assert_eq!(c.policy.max_iterations, 8);
        assert_eq!(c.backend, Backend::Template);
        assert!(c.project.unwrap().is_absolute() || d.path().is_relative());
    }

    #[test]
    fn remote_without_endpoint_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir(d.path().join("proj")).unwrap();
        write(d.path(), "m.yaml", "schema_version: 1\nunits: []\n");
        let p = write(
            d.path(),
            "c.yaml",
            "backend: remote\nproject: proj\nmanifest: m.yaml\nsandbox: {command: [r]}\n",
        );
        let err = load_config(&p).unwrap_err();
        assert!(err.errors.iter().any(|e| e.contains("`remote`")), "{err}");
    }

    #[test]
    fn errors_are_aggregated() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "c.yaml",
            "project: nope\nmanifest: nope.yaml\npolicy: {coverage_threshold: 1.2}\nsandbox: {command: []}\n",
        );
        let err = load_config(&p).unwrap_err();
        assert!(err.errors.len() >= 4, "{err}");
        assert!(err.errors.iter().any(|e| e.contains("threshold out of [0,1]")));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "c.yaml", "backend: synthetic\nscenaro: x.yaml\n");
        let err = load_config(&p).unwrap_err();
        assert!(err.to_string().contains("scenaro"), "{err}");
    }
}
