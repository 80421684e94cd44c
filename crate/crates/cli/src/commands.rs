//! `run`, `simulate`, `report`, `replay` and `validate`.
//!
//! State directory layout:
//!
//! ```text
//! <state>/artifacts/objects/<hh>/<digest>   content-addressed artifacts
//! <state>/artifacts/index.jsonl             artifact index
//! <state>/metrics/<run_id>.jsonl            per-iteration metrics
//! <state>/runs/<run_id>/run.json            run record (report + config addresses)
//! <state>/runs/<run_id>/trace.jsonl         default trace location
//! <state>/runs/<run_id>/sandbox/            default sandbox workdir
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ata_core::execution::{ExecutionAgent, ExecutionError, FailureClassifier, SubprocessExecutor};
use ata_core::generation::{GenerationAgent, GenerationError, InterfaceManifest, RemoteGenerator, TemplateGenerator, TestTemplate};
use ata_core::harness::{simulate_runs, SimulationSettings, SyntheticGenerator, SyntheticRunner, SyntheticScenario};
use ata_core::memory::{ArtifactAddress, MediaType, PruneWindow, Stores};
use ata_core::metrics::{compute_metrics, IterationMetrics};
use ata_core::model::TestSuite;
use ata_core::orchestrator::{run_loop, Agents, Clock, InProcessBus, LoopConfig, LoopReport, OrchestratorError, TraceLog};
use ata_core::review::{ReviewAgent, ReviewConfig};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, Backend, ConfigError, RunConfig};
use crate::report::{render_json, render_text, summarize};
use crate::{exit, exit_code_for, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub report: String,
    pub config: String,
    pub trace: PathBuf,
}

pub struct StateDir {
    pub root: PathBuf,
}

impl StateDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        StateDir {
            root: std::path::absolute(&root).unwrap_or(root),
        }
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn stores(&self, dimension: usize) -> Result<Stores, CliError> {
        Stores::open(&self.root, dimension)
            .with_context(|| format!("opening state directory {}", self.root.display()))
            .map_err(CliError::Other)
    }

    pub fn record(&self, run_id: &str) -> Result<RunRecord, CliError> {
        let path = self.run_dir(run_id).join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|_| CliError::NotFound(format!("run `{run_id}`")))?;
        serde_json::from_str(&text)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(CliError::Other)
    }

    pub fn load_report(&self, run_id: &str) -> Result<(RunRecord, LoopReport, RunConfig, Stores), CliError> {
        let rec = self.record(run_id)?;
        let stores = self.stores(1)?;
        let addr: ArtifactAddress = rec.report.parse().map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
        let report: LoopReport = stores.artifacts.get_json(&addr).map_err(|e| CliError::Other(e.into()))?;
        let caddr: ArtifactAddress = rec.config.parse().map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
        let config: RunConfig = stores.artifacts.get_json(&caddr).map_err(|e| CliError::Other(e.into()))?;
        Ok((rec, report, config, stores))
    }

    /// `<stem>-s<seed>`, suffixed when a run of that name already exists.
    pub fn fresh_run_id(&self, stem: &str, seed: u64) -> String {
        let base = format!("{stem}-s{seed}");
        if !self.run_dir(&base).exists() {
            return base;
        }
        (2..)
            .map(|n| format!("{base}-{n}"))
            .find(|id| !self.run_dir(id).exists())
            .expect("unbounded search")
    }
}

pub struct Backends {
    pub generation: Box<dyn GenerationAgent>,
    pub execution: Box<dyn ExecutionAgent>,
    pub project_ref: String,
}

fn gen_config_error(e: GenerationError) -> CliError {
    CliError::Config(ConfigError::one(e.to_string()))
}

fn executor(cfg: &RunConfig, workdir: &Path) -> Result<Box<dyn ExecutionAgent>, CliError> {
    let section = cfg.sandbox.clone().unwrap_or_default();
    let sc = section.resolve(workdir, cfg.project.as_deref());
    std::fs::create_dir_all(&sc.workdir).map_err(|e| CliError::Sandbox(format!("{}: {e}", sc.workdir.display())))?;
    match SubprocessExecutor::new(sc) {
        Ok(x) => Ok(Box::new(x)),
        Err(ExecutionError::Config(m)) => Err(CliError::Config(ConfigError::one(m))),
        Err(e) => Err(CliError::Sandbox(e.to_string())),
    }
}

fn project_stem(cfg: &RunConfig) -> String {
    let p = match cfg.backend {
        Backend::Synthetic => cfg.scenario.as_deref(),
        _ => cfg.project.as_deref(),
    };
    p.and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn build_backends(cfg: &RunConfig, workdir: &Path) -> Result<Backends, CliError> {
    if cfg.backend == Backend::Synthetic {
        let path = cfg.scenario.as_deref().ok_or_else(|| ConfigError::one("missing required key `scenario`"))?;
        let s = SyntheticScenario::load(path).map_err(|e| ConfigError::one(e.to_string()))?;
        return Ok(Backends {
            project_ref: s.name.clone(),
            generation: Box::new(SyntheticGenerator::new(s.clone())),
            execution: Box::new(SyntheticRunner::new(s)),
        });
    }
    let project = cfg.project.clone().ok_or_else(|| ConfigError::one("missing required key `project`"))?;
    let manifest_path = cfg.manifest.as_deref().ok_or_else(|| ConfigError::one("missing required key `manifest`"))?;
    let manifest = InterfaceManifest::load(manifest_path).map_err(gen_config_error)?;
    manifest
        .validate(Some(&project))
        .map_err(|errors| ConfigError { errors })?;
    let template = match &cfg.template {
        Some(p) => TestTemplate::load(p).map_err(gen_config_error)?,
        None => TestTemplate::pytest(),
    };
    let project_ref = if manifest.project.is_empty() { project_stem(cfg) } else { manifest.project.clone() };
    let generation: Box<dyn GenerationAgent> = match cfg.backend {
        Backend::Template => Box::new(TemplateGenerator::new(manifest, template).map_err(gen_config_error)?),
        _ => {
            let remote = cfg.remote.clone().ok_or_else(|| ConfigError::one("missing required key `remote`"))?;
            Box::new(RemoteGenerator::from_env(remote, manifest, template, Some(project)).map_err(gen_config_error)?)
        }
    };
    Ok(Backends {
        generation,
        execution: executor(cfg, workdir)?,
        project_ref,
    })
}

pub fn review_agent(cfg: &RunConfig) -> Result<ReviewAgent, CliError> {
    let rc = ReviewConfig {
        weights: cfg.weights,
        risk: cfg.risk()?,
        discard_after: cfg.repair.discard_after,
        context_k: cfg.repair.context_k,
        citation_similarity: cfg.repair.citation_similarity,
    };
    ReviewAgent::new(FailureClassifier::python(), rc).map_err(|e| CliError::Config(ConfigError::one(e.to_string())))
}

pub fn cmd_validate(config: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_config(config)?;
    if cfg.backend != Backend::Synthetic {
        let manifest = InterfaceManifest::load(cfg.manifest.as_deref().expect("validated")).map_err(gen_config_error)?;
        manifest
            .validate(cfg.project.as_deref())
            .map_err(|errors| ConfigError { errors })?;
    } else {
        SyntheticScenario::load(cfg.scenario.as_deref().expect("validated"))
            .map_err(|e| ConfigError::one(e.to_string()))?;
    }
    writeln!(out, "configuration valid ({:?} backend)", cfg.backend).map_err(anyhow::Error::from)?;
    Ok(exit::OK)
}

pub fn cmd_run(config: &Path, state: &StateDir, run_id: Option<String>, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_config(config)?;
    let run_id = run_id.unwrap_or_else(|| state.fresh_run_id(&project_stem(&cfg), cfg.seed));
    let run_dir = state.run_dir(&run_id);
    if run_dir.join("run.json").exists() {
        return Err(ConfigError::one(format!("run `{run_id}` already exists")).into());
    }
    let backends = build_backends(&cfg, &run_dir.join("sandbox"))?;
    let review = review_agent(&cfg)?;
    std::fs::create_dir_all(&run_dir)
        .with_context(|| format!("creating {}", run_dir.display()))
        .map_err(CliError::Other)?;
    let stores = state.stores(cfg.memory.dimension)?;
    let trace_path = cfg.trace.clone().unwrap_or_else(|| run_dir.join("trace.jsonl"));
    let trace = TraceLog::open(&trace_path).map_err(|e| CliError::Other(e.into()))?;
    let bus = InProcessBus::new();

    let mut lc = LoopConfig::new(run_id.clone(), backends.project_ref.clone());
    lc.policy = cfg.policy.clone();
    lc.seed = cfg.seed;
    lc.initial_budget = cfg.initial_budget;
    lc.gap_fill_budget = cfg.gap_fill_budget;
    lc.full_regeneration = cfg.full_regeneration;
    lc.memory_window = Some(PruneWindow {
        window_iterations: cfg.memory.window_iterations,
        max_records: cfg.memory.max_records,
    });
    lc.control_path = cfg.control.clone();
    lc.clock = Clock::System;

    let report = match run_loop(
        lc,
        Agents {
            generation: backends.generation.as_ref(),
            execution: backends.execution.as_ref(),
            review,
        },
        &stores,
        &trace,
        &bus,
    ) {
        Ok(r) => r,
        Err(OrchestratorError::Config(errors)) => return Err(ConfigError { errors }.into()),
        Err(e) => return Err(CliError::Other(e.into())),
    };

    let report_addr = stores
        .artifacts
        .put_json(&report, MediaType::LoopReport)
        .map_err(|e| CliError::Other(e.into()))?;
    let config_addr = stores
        .artifacts
        .put_json(&cfg, MediaType::Config)
        .map_err(|e| CliError::Other(e.into()))?;
    let record = RunRecord {
        run_id: run_id.clone(),
        report: report_addr.to_string(),
        config: config_addr.to_string(),
        trace: trace_path,
    };
    std::fs::write(
        run_dir.join("run.json"),
        serde_json::to_vec_pretty(&record).expect("record serializes"),
    )
    .with_context(|| format!("writing run record under {}", run_dir.display()))
    .map_err(CliError::Other)?;

    write!(out, "{}", render_text(&summarize(&report))).map_err(anyhow::Error::from)?;
    if let Some(f) = &report.failure {
        writeln!(out, "error: {}", f.message).map_err(anyhow::Error::from)?;
    }
    Ok(exit_code_for(&report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
}

pub fn cmd_report(state: &StateDir, run_id: &str, format: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let (_, report, _, _) = state.load_report(run_id)?;
    let s = summarize(&report);
    let text = match format {
        Format::Text => render_text(&s),
        Format::Json => render_json(&s) + "\n",
    };
    out.write_all(text.as_bytes()).map_err(anyhow::Error::from)?;
    Ok(exit::OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub run_id: String,
    pub iteration: u32,
    pub recorded: IterationMetrics,
    pub replayed: IterationMetrics,
    pub coverage_delta: f64,
    pub failure_rate_delta: f64,
    pub runtime_delta_s: f64,
    /// Coverage, failure rate and verdict counts all equal the recording.
    pub matches: bool,
}

pub fn metrics_match(a: &IterationMetrics, b: &IterationMetrics) -> bool {
    let mut ca = a.counts;
    let mut cb = b.counts;
    ca.agent_invocations = 0;
    cb.agent_invocations = 0;
    a.coverage == b.coverage && a.branch_coverage == b.branch_coverage && a.failure_rate == b.failure_rate && ca == cb
}

pub fn replay(
    state: &StateDir,
    run_id: &str,
    iteration: u32,
    per_test_timeout_s: Option<f64>,
) -> Result<ReplayOutcome, CliError> {
    let (_, report, mut cfg, stores) = state.load_report(run_id)?;
    let idx = iteration
        .checked_sub(1)
        .map(|i| i as usize)
        .filter(|i| *i < report.suite_refs.len())
        .ok_or_else(|| CliError::NotFound(format!("iteration {iteration} of run `{run_id}`")))?;
    let suite: TestSuite = stores
        .artifacts
        .get_json(&report.suite_refs[idx])
        .map_err(|e| CliError::NotFound(e.to_string()))?;
    let recorded = report
        .metrics_history
        .get(idx)
        .cloned()
        .ok_or_else(|| CliError::NotFound(format!("metrics for iteration {iteration}")))?;
    if let Some(t) = per_test_timeout_s {
        cfg.sandbox.get_or_insert_with(Default::default).per_test_timeout_s = Some(t);
    }
    let n = (1..)
        .find(|n| !state.run_dir(run_id).join(format!("replay-{iteration}-{n}")).exists())
        .expect("unbounded search");
    let workdir = state.run_dir(run_id).join(format!("replay-{iteration}-{n}"));
    let executor: Box<dyn ExecutionAgent> = match cfg.backend {
        Backend::Synthetic => {
            let s = SyntheticScenario::load(cfg.scenario.as_deref().expect("stored config"))
                .map_err(|e| CliError::Config(ConfigError::one(e.to_string())))?;
            Box::new(SyntheticRunner::new(s))
        }
        _ => executor(&cfg, &workdir)?,
    };
    let result = executor.execute_suite(&suite).map_err(|e| match e {
        e if e.is_sandbox_failure() => CliError::Sandbox(e.to_string()),
        e => CliError::Other(e.into()),
    })?;
    let mut replayed = compute_metrics(iteration, &suite, &result.outcomes, &result.coverage, result.wall_time_s)
        .map_err(|e| CliError::Other(e.into()))?;
    replayed.counts.agent_invocations = 1;
    Ok(ReplayOutcome {
        run_id: run_id.to_string(),
        iteration,
        coverage_delta: replayed.coverage - recorded.coverage,
        failure_rate_delta: replayed.failure_rate - recorded.failure_rate,
        runtime_delta_s: replayed.runtime_s - recorded.runtime_s,
        matches: metrics_match(&recorded, &replayed),
        recorded,
        replayed,
    })
}

pub fn cmd_replay(
    state: &StateDir,
    run_id: &str,
    iteration: u32,
    per_test_timeout_s: Option<f64>,
    format: Format,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let r = replay(state, run_id, iteration, per_test_timeout_s)?;
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&r).expect("replay serializes") + "\n",
        Format::Text => format!(
            "replay {} iteration {}: coverage {:.4} ({:+.4}), failure rate {:.4} ({:+.4}), runtime {:.3}s ({:+.3}s), {}\n",
            r.run_id,
            r.iteration,
            r.replayed.coverage,
            r.coverage_delta,
            r.replayed.failure_rate,
            r.failure_rate_delta,
            r.replayed.runtime_s,
            r.runtime_delta_s,
            if r.matches { "matches recording" } else { "differs from recording" }
        ),
    };
    out.write_all(text.as_bytes()).map_err(anyhow::Error::from)?;
    Ok(if r.matches { exit::OK } else { exit::EXHAUSTED })
}

pub fn cmd_simulate(
    scenario: &Path,
    runs: usize,
    seed: u64,
    gap_fill_budget: usize,
    format: Format,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    if runs == 0 {
        return Err(ConfigError::one("--runs must be at least 1").into());
    }
    let s = SyntheticScenario::load(scenario).map_err(|e| ConfigError::one(e.to_string()))?;
    let settings = SimulationSettings {
        gap_fill_budget,
        ..Default::default()
    };
    let r = simulate_runs(&s, &settings, runs, seed).map_err(|e| ConfigError::one(e.to_string()))?;
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&r).expect("report serializes") + "\n",
        Format::Text => {
            let q = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v}"));
            format!(
                "scenario {}: {} runs, seed {}\nconverged {}/{} (rate {:.2})\niterations to convergence: median {}, q1 {}, q3 {}\n",
                r.scenario,
                r.runs,
                r.seed,
                r.converged,
                r.runs,
                r.convergence_rate,
                q(r.median),
                q(r.q1),
                q(r.q3)
            )
        }
    };
    out.write_all(text.as_bytes()).map_err(anyhow::Error::from)?;
    Ok(exit::OK)
}
