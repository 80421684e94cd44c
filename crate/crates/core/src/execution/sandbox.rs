//! Subprocess sandbox speaking the runner protocol.
//!
//! Each execution clears `<workdir>/generated_tests/` and
//! `<workdir>/ata_result.json`, writes one file per test named
//! `test_<id>.<ext>`, then runs the configured command with
//! `--out <workdir>/ata_result.json` appended. The environment is cleared
//! down to the allowlist plus `ATA_WORKDIR`, `ATA_PROJECT_DIR` and
//! `ATA_PER_TEST_TIMEOUT_S`. The exit status is recorded but only the
//! document decides verdicts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::coverage::{parse_coverage, CoverageFormat};
use super::protocol::{parse_result_document, ResultEntry, RunnerResultDocument, RESULT_FILE, TESTS_DIR};
use super::{ExecutionAgent, ExecutionError, ExecutionReport};
use crate::model::{CoverageMap, ExecutionOutcome, Phase, TestId, TestSuite, Verdict};

fn default_per_test_timeout() -> f64 {
    30.0
}
fn default_suite_timeout() -> f64 {
    600.0
}
fn default_parallel() -> usize {
    1
}
fn default_extension() -> String {
    "py".into()
}
fn default_allowlist() -> Vec<String> {
    ["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONPATH", "VIRTUAL_ENV"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    pub workdir: PathBuf,
    /// Program and leading arguments; `{workdir}` and `{project}` are
    /// substituted.
    pub command: Vec<String>,
    #[serde(default)]
    pub project_dir: Option<PathBuf>,
    #[serde(default = "default_per_test_timeout")]
    pub per_test_timeout_s: f64,
    #[serde(default = "default_suite_timeout")]
    pub suite_timeout_s: f64,
    #[serde(default = "default_allowlist")]
    pub env_allowlist: Vec<String>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_extension")]
    pub test_file_extension: String,
}

impl SandboxConfig {
    pub fn new(workdir: impl Into<PathBuf>, command: Vec<String>) -> Self {
        SandboxConfig {
            workdir: workdir.into(),
            command,
            project_dir: None,
            per_test_timeout_s: default_per_test_timeout(),
            suite_timeout_s: default_suite_timeout(),
            env_allowlist: default_allowlist(),
            max_parallel: default_parallel(),
            test_file_extension: default_extension(),
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut v = Vec::new();
        if !(self.per_test_timeout_s > 0.0) {
            v.push(format!("per_test_timeout_s must be > 0: {}", self.per_test_timeout_s));
        }
        if !(self.suite_timeout_s > 0.0) {
            v.push(format!("suite_timeout_s must be > 0: {}", self.suite_timeout_s));
        }
        if self.max_parallel < 1 {
            v.push("max_parallel must be >= 1".into());
        }
        if self.command.is_empty() {
            v.push("runner command is empty".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubprocessExecutor {
    config: SandboxConfig,
}

struct ShardRun {
    document: Option<RunnerResultDocument>,
    coverage: CoverageMap,
    timed_out: bool,
    elapsed: Duration,
    tests: Vec<TestId>,
}

impl SubprocessExecutor {
    pub fn new(mut config: SandboxConfig) -> Result<Self, ExecutionError> {
        config
            .validate()
            .map_err(|v| ExecutionError::Config(v.join("; ")))?;
        // the runner starts inside the workdir, so relative paths would
        // resolve twice
        config.workdir = std::path::absolute(&config.workdir).map_err(|e| ExecutionError::Config(e.to_string()))?;
        Ok(SubprocessExecutor { config })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn prepare(&self, dir: &Path, suite: &TestSuite, ids: &[TestId]) -> Result<(), ExecutionError> {
        let tests_dir = dir.join(TESTS_DIR);
        if tests_dir.exists() {
            fs::remove_dir_all(&tests_dir).map_err(|e| ExecutionError::Sandbox(format!("{}: {e}", tests_dir.display())))?;
        }
        let out = dir.join(RESULT_FILE);
        if out.exists() {
            fs::remove_file(&out).map_err(|e| ExecutionError::Sandbox(format!("{}: {e}", out.display())))?;
        }
        fs::create_dir_all(&tests_dir).map_err(|e| ExecutionError::Sandbox(format!("{}: {e}", tests_dir.display())))?;
        for id in ids {
            let test = suite.get(id).expect("shard ids come from the suite");
            let path = tests_dir.join(format!("test_{}.{}", id, self.config.test_file_extension));
            fs::write(&path, &test.source_text).map_err(|e| ExecutionError::Sandbox(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    fn command_for(&self, dir: &Path) -> Command {
        let project = self
            .config
            .project_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let subst = |s: &str| {
            s.replace("{workdir}", &dir.display().to_string())
                .replace("{project}", &project)
        };
        let mut cmd = Command::new(subst(&self.config.command[0]));
        cmd.args(self.config.command[1..].iter().map(|a| subst(a)))
            .arg("--out")
            .arg(dir.join(RESULT_FILE))
            .current_dir(dir)
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        for key in &self.config.env_allowlist {
            if let Ok(v) = std::env::var(key) {
                cmd.env(key, v);
            }
        }
        cmd.env("ATA_WORKDIR", dir)
            .env("ATA_PROJECT_DIR", &project)
            .env("ATA_PER_TEST_TIMEOUT_S", self.config.per_test_timeout_s.to_string());
        cmd
    }

    fn run_shard(&self, dir: &Path, suite: &TestSuite, ids: Vec<TestId>) -> Result<ShardRun, ExecutionError> {
        fs::create_dir_all(dir).map_err(|e| ExecutionError::Sandbox(format!("{}: {e}", dir.display())))?;
        self.prepare(dir, suite, &ids)?;
        let start = Instant::now();
        let mut child = self
            .command_for(dir)
            .spawn()
            .map_err(|e| ExecutionError::Sandbox(format!("failed to start runner `{}`: {e}", self.config.command[0])))?;
        let budget = Duration::from_secs_f64(self.config.suite_timeout_s);
        let status = child.wait_timeout(budget).map_err(|e| ExecutionError::Sandbox(e.to_string()))?;
        let timed_out = status.is_none();
        if timed_out {
            let _ = child.kill();
            let _ = child.wait();
        }
        let elapsed = start.elapsed();
        let out = dir.join(RESULT_FILE);
        let document = if out.exists() {
            let raw = fs::read(&out).map_err(|e| ExecutionError::Sandbox(e.to_string()))?;
            match parse_result_document(&raw) {
                Ok(doc) => Some(doc),
                // a killed runner may leave a half-written document
                Err(_) if timed_out => None,
                Err(e) => return Err(e.into()),
            }
        } else if timed_out {
            None
        } else {
            return Err(ExecutionError::MissingDocument(out));
        };
        let mut coverage = CoverageMap::new();
        if let Some(doc) = &document {
            if let Some(native) = &doc.coverage {
                coverage.merge(&native.to_map()?);
            }
            if let Some(ext) = &doc.coverage_report {
                let format: CoverageFormat = ext.format.parse()?;
                let raw = fs::read(dir.join(&ext.path))
                    .map_err(|e| ExecutionError::Coverage(format!("{}: {e}", ext.path)))?;
                coverage.merge(&parse_coverage(&raw, format)?);
            }
        }
        Ok(ShardRun {
            document,
            coverage,
            timed_out,
            elapsed,
            tests: ids,
        })
    }
}

/// One outcome per suite test. Tests the runner never reported become
/// Error/collect, or Timeout when the suite budget ran out.
pub fn complete_outcomes(
    suite: &TestSuite,
    entries: &HashMap<String, ResultEntry>,
    timed_out: &HashMap<TestId, f64>,
    per_test_timeout_s: f64,
) -> Vec<ExecutionOutcome> {
    suite
        .tests
        .iter()
        .map(|t| match entries.get(t.id.as_str()) {
            Some(e) => {
                let mut duration_s = e.duration_ms / 1000.0;
                if e.verdict == Verdict::Timeout {
                    duration_s = duration_s.max(per_test_timeout_s);
                }
                ExecutionOutcome {
                    test_id: t.id.clone(),
                    verdict: e.verdict,
                    duration_s,
                    phase: e.phase,
                    raw_message: e.message.clone(),
                }
            }
            None => match timed_out.get(&t.id) {
                Some(elapsed) => ExecutionOutcome {
                    test_id: t.id.clone(),
                    verdict: Verdict::Timeout,
                    duration_s: *elapsed,
                    phase: Phase::Call,
                    raw_message: "suite timeout exceeded before the runner reported this test".into(),
                },
                None => ExecutionOutcome {
                    test_id: t.id.clone(),
                    verdict: Verdict::Error,
                    duration_s: 0.0,
                    phase: Phase::Collect,
                    raw_message: "runner did not report this test".into(),
                },
            },
        })
        .collect()
}

impl ExecutionAgent for SubprocessExecutor {
    fn execute_suite(&self, suite: &TestSuite) -> Result<ExecutionReport, ExecutionError> {
        let root = &self.config.workdir;
        let meta = fs::metadata(root).map_err(|e| ExecutionError::Sandbox(format!("{}: {e}", root.display())))?;
        if !meta.is_dir() || meta.permissions().readonly() {
            return Err(ExecutionError::Sandbox(format!("{} is not a writable directory", root.display())));
        }
        let ids: Vec<TestId> = suite.tests.iter().map(|t| t.id.clone()).collect();
        let shards = self.config.max_parallel.min(ids.len()).max(1);
        let start = Instant::now();
        let runs: Vec<Result<ShardRun, ExecutionError>> = if shards == 1 {
            vec![self.run_shard(root, suite, ids)]
        } else {
            let mut buckets = vec![Vec::new(); shards];
            for (i, id) in ids.into_iter().enumerate() {
                buckets[i % shards].push(id);
            }
            std::thread::scope(|scope| {
                let handles: Vec<_> = buckets
                    .into_iter()
                    .enumerate()
                    .map(|(k, bucket)| {
                        let dir = root.join(format!("shard-{k}"));
                        scope.spawn(move || self.run_shard(&dir, suite, bucket))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("shard thread panicked")).collect()
            })
        };
        let wall_time_s = start.elapsed().as_secs_f64();

        let mut merged = RunnerResultDocument::empty(0);
        merged.coverage = None;
        let mut coverage = CoverageMap::new();
        let mut entries = HashMap::new();
        let mut timed_out = HashMap::new();
        for run in runs {
            let run = run?;
            coverage.merge(&run.coverage);
            if let Some(doc) = run.document {
                if doc.runner.exit_status != 0 {
                    merged.runner.exit_status = doc.runner.exit_status;
                }
                if doc.runner.error.is_some() {
                    merged.runner.error = doc.runner.error.clone();
                }
                merged.runner.name = doc.runner.name.clone();
                for e in doc.tests {
                    if !suite.contains(&TestId::from_hex(e.id.clone())) {
                        return Err(ExecutionError::UnknownTest(e.id));
                    }
                    entries.insert(e.id.clone(), e.clone());
                    merged.tests.push(e);
                }
            }
            if run.timed_out {
                for id in run.tests {
                    timed_out.insert(id, run.elapsed.as_secs_f64());
                }
            }
        }
        merged.coverage = Some(super::coverage::NativeCoverage::from_map(&coverage));
        let outcomes = complete_outcomes(suite, &entries, &timed_out, self.config.per_test_timeout_s);
        Ok(ExecutionReport {
            outcomes,
            coverage,
            wall_time_s,
            document: merged,
        })
    }
}
