//! The refinement loop as an explicit state machine.
//!
//! ```text
//! Generating -> Executing -> Analyzing -> Deciding -+-> Terminated
//!                   ^                               |
//!                   +---------- Refining <----------+
//! ```
//!
//! Calibration documents are only honored in `Deciding`, after the
//! iteration's metrics are persisted and before refinement starts.

pub mod bus;
pub mod calibration;
pub mod trace;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::execution::{ExecutionAgent, ExecutionError, ExecutionReport};
use crate::generation::{GenerationAgent, GenerationContext, GenerationError, GenerationRequest};
use crate::memory::{ArtifactAddress, MediaType, MemoryKind, PruneWindow, StoreError, Stores};
use crate::metrics::{
    check_convergence, compute_metrics, validate_policy, ConvergenceDecision, ConvergencePolicy, IterationMetrics,
    MetricsError,
};
use crate::model::{AgentRole, TestId, TestSuite};
use crate::review::{FeedbackBundle, RefineContext, RepeatTracker, ReviewAgent, ReviewError};

pub use bus::{AgentMessage, InProcessBus, Transport, MESSAGE_SCHEMA_VERSION};
pub use calibration::{CalibrationOverride, PolicyOverride};
pub use trace::{TraceEvent, TraceLog, TraceRecord, ITERATION_END};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid loop configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("trace sink unwritable: {0}")]
    Trace(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("calibration rejected: {}", .0.join("; "))]
    Calibration(Vec<String>),
    #[error("calibration is only accepted at an iteration boundary (state {0:?})")]
    NotAtBoundary(LoopState),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Execution(#[from] ExecutionError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopState {
    Generating,
    Executing,
    Analyzing,
    Refining,
    Deciding,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminationReason {
    Converged,
    Exhausted,
    OperatorStop,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Sandbox,
    Operational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopFailure {
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub run_id: String,
    pub converged: bool,
    pub iterations_executed: u32,
    pub metrics_history: Vec<IterationMetrics>,
    pub final_suite_ref: Option<ArtifactAddress>,
    /// Suite executed in each iteration, in order.
    pub suite_refs: Vec<ArtifactAddress>,
    pub termination_reason: TerminationReason,
    pub agent_invocation_totals: BTreeMap<AgentRole, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<LoopFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Fixed(t) => *t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub run_id: String,
    pub project_ref: String,
    pub policy: ConvergencePolicy,
    pub seed: u64,
    /// Tests requested in iteration 1.
    pub initial_budget: usize,
    /// Extra tests requested for uncovered statements while coverage is
    /// below threshold; 0 disables.
    pub gap_fill_budget: usize,
    /// Regenerate the whole suite each iteration instead of repairing it.
    pub full_regeneration: bool,
    pub memory_window: Option<PruneWindow>,
    pub control_path: Option<PathBuf>,
    pub clock: Clock,
}

impl LoopConfig {
    pub fn new(run_id: impl Into<String>, project_ref: impl Into<String>) -> Self {
        LoopConfig {
            run_id: run_id.into(),
            project_ref: project_ref.into(),
            policy: ConvergencePolicy::default(),
            seed: 0,
            initial_budget: 32,
            gap_fill_budget: 4,
            full_regeneration: false,
            memory_window: Some(PruneWindow {
                window_iterations: 3,
                max_records: 512,
            }),
            control_path: None,
            clock: Clock::System,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errors: Vec<String> = Vec::new();
        if let Err(v) = validate_policy(&self.policy) {
            errors.extend(v.iter().map(|e| e.to_string()));
        }
        if self.run_id.trim().is_empty() {
            errors.push("run_id is empty".into());
        }
        if self.initial_budget == 0 {
            errors.push("initial_budget must be at least 1".into());
        }
        if let Some(w) = self.memory_window {
            if w.window_iterations == 0 || w.max_records == 0 {
                errors.push("memory window W and N must be at least 1".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

pub struct Agents<'a> {
    pub generation: &'a dyn GenerationAgent,
    pub execution: &'a dyn ExecutionAgent,
    pub review: ReviewAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepDecision {
    Converged,
    Continue,
    Exhausted,
    OperatorStop,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub metrics: IterationMetrics,
    pub bundle: FeedbackBundle,
    pub decision: StepDecision,
    /// The next suite; equal to the input unless the decision is Continue.
    pub refined: TestSuite,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub iteration: u32,
    pub phase: LoopState,
    pub policy: ConvergencePolicy,
    pub history: Vec<IterationMetrics>,
    pub suite_refs: Vec<ArtifactAddress>,
    pub invocations: BTreeMap<AgentRole, u32>,
    pub repeats: RepeatTracker,
    pub retired_ids: HashSet<TestId>,
    pub retired_refs: HashSet<String>,
    pending_invocations: u32,
}

impl RunState {
    fn at_boundary(&self) -> bool {
        // Generating covers both the start of the run and a refined suite
        // waiting for its iteration
        matches!(self.phase, LoopState::Deciding | LoopState::Generating)
    }
}

/// splitmix64 step, used to derive per-iteration seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Orchestrator<'a> {
    config: LoopConfig,
    agents: Agents<'a>,
    stores: &'a Stores,
    trace: &'a TraceLog,
    transport: &'a dyn Transport,
    state: RunState,
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        config: LoopConfig,
        agents: Agents<'a>,
        stores: &'a Stores,
        trace: &'a TraceLog,
        transport: &'a dyn Transport,
    ) -> Result<Self, OrchestratorError> {
        config.validate().map_err(OrchestratorError::Config)?;
        let state = RunState {
            iteration: 1,
            phase: LoopState::Generating,
            policy: config.policy.clone(),
            history: Vec::new(),
            suite_refs: Vec::new(),
            invocations: AgentRole::ALL.iter().map(|r| (*r, 0)).collect(),
            repeats: RepeatTracker::default(),
            retired_ids: HashSet::new(),
            retired_refs: HashSet::new(),
            pending_invocations: 0,
        };
        Ok(Orchestrator {
            config,
            agents,
            stores,
            trace,
            transport,
            state,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn review(&self) -> &ReviewAgent {
        &self.agents.review
    }

    fn correlation_id(&self) -> String {
        format!("{}-it{}", self.config.run_id, self.state.iteration)
    }

    fn count(&mut self, role: AgentRole, n: u32) {
        *self.state.invocations.entry(role).or_insert(0) += n;
        self.state.pending_invocations += n;
    }

    pub fn emit_trace_event(&self, event: TraceEvent) -> Result<TraceRecord, OrchestratorError> {
        self.trace.emit(&self.config.run_id, self.config.clock.now(), event)
    }

    fn event(
        &self,
        agent: AgentRole,
        kind: &str,
        rationale: impl Into<String>,
        payload_summary: serde_json::Value,
    ) -> Result<(), OrchestratorError> {
        self.emit_trace_event(TraceEvent {
            iteration: self.state.iteration,
            agent,
            kind: kind.to_string(),
            correlation_id: self.correlation_id(),
            rationale: rationale.into(),
            payload_summary,
        })?;
        Ok(())
    }

    fn send(&self, sender: AgentRole, kind: &str, payload: serde_json::Value) -> Result<(), OrchestratorError> {
        self.transport
            .send(AgentMessage {
                correlation_id: self.correlation_id(),
                iteration: self.state.iteration,
                sender,
                kind: kind.to_string(),
                payload,
                schema_version: MESSAGE_SCHEMA_VERSION,
                timestamp: self.config.clock.now(),
            })
            .map_err(OrchestratorError::Transport)
    }

    /// Replaces policy and weights. Only valid between iterations.
    pub fn apply_calibration(&mut self, o: &CalibrationOverride) -> Result<(), OrchestratorError> {
        if !self.state.at_boundary() {
            return Err(OrchestratorError::NotAtBoundary(self.state.phase));
        }
        let (policy, weights) = o
            .resolve(&self.state.policy, &self.agents.review.config().weights)
            .map_err(OrchestratorError::Calibration)?;
        self.agents
            .review
            .set_weights(weights)
            .map_err(|e| OrchestratorError::Calibration(vec![e.to_string()]))?;
        self.state.policy = policy;
        let note = if o.note.trim().is_empty() { "operator calibration" } else { o.note.as_str() };
        self.event(
            AgentRole::Orchestrator,
            "calibration",
            note,
            json!({
                "policy": self.state.policy,
                "weights": weights,
                "stop": o.stop,
            }),
        )
    }

    /// Applies the control document if one is present. Returns true when it
    /// asks the run to stop.
    fn poll_calibration(&mut self) -> Result<bool, OrchestratorError> {
        let Some(path) = self.config.control_path.clone() else { return Ok(false) };
        match calibration::poll(&path) {
            calibration::Polled::Absent => Ok(false),
            calibration::Polled::Unreadable(msg) => {
                let _ = calibration::archive(&path, self.state.iteration, false);
                self.event(AgentRole::Orchestrator, "calibration-rejected", msg, json!({}))?;
                Ok(false)
            }
            calibration::Polled::Found(o) => match self.apply_calibration(&o) {
                Ok(()) => {
                    let _ = calibration::archive(&path, self.state.iteration, true);
                    Ok(o.stop)
                }
                Err(OrchestratorError::Calibration(errs)) => {
                    let _ = calibration::archive(&path, self.state.iteration, false);
                    self.event(AgentRole::Orchestrator, "calibration-rejected", errs.join("; "), json!({}))?;
                    Ok(false)
                }
                Err(e) => Err(e),
            },
        }
    }

    fn generate_initial(&mut self) -> Result<TestSuite, OrchestratorError> {
        self.state.phase = LoopState::Generating;
        let (targets, _) = crate::review::prioritize_targets(
            &crate::model::CoverageMap::new(),
            &self.agents.review.config().risk,
            &self.agents.review.config().weights,
        )?;
        let ctx = GenerationContext {
            targets,
            ..Default::default()
        };
        self.generate_into(&ctx, self.config.initial_budget, &HashSet::new(), "initial generation")
    }

    fn generate_into(
        &mut self,
        ctx: &GenerationContext,
        budget: usize,
        exclude_ids: &HashSet<TestId>,
        why: &str,
    ) -> Result<TestSuite, OrchestratorError> {
        self.send(AgentRole::Orchestrator, "generate-request", json!({"budget": budget}))?;
        self.count(AgentRole::Generation, 1);
        let req = GenerationRequest {
            project_ref: &self.config.project_ref,
            iteration: self.state.iteration,
            context: ctx,
            budget,
            seed: derive_seed(self.config.seed, u64::from(self.state.iteration)),
            now: self.config.clock.now(),
            exclude_ids,
            exclude_refs: &self.state.retired_refs,
            targets_only: false,
        };
        let out = self.agents.generation.generate_tests(&req)?;
        for q in &out.quarantined {
            self.stores.artifacts.put_json(q, MediaType::Quarantine)?;
        }
        let mut suite = TestSuite::new(self.config.project_ref.clone(), self.state.iteration);
        for t in out.tests {
            suite.push_unique(t);
        }
        self.send(
            AgentRole::Generation,
            "suite",
            json!({"tests": suite.len(), "quarantined": out.quarantined.len()}),
        )?;
        self.event(
            AgentRole::Generation,
            "generated",
            why,
            json!({
                "tests": suite.len(),
                "quarantined": out.quarantined.len(),
                "duplicates": out.duplicates.len(),
            }),
        )?;
        Ok(suite)
    }

    fn persist_suite(&mut self, suite: &TestSuite) -> Result<ArtifactAddress, OrchestratorError> {
        suite
            .validate()
            .map_err(|e| OrchestratorError::Integrity(e.to_string()))?;
        for t in &suite.tests {
            t.validate()
                .map_err(|e| OrchestratorError::Integrity(format!("test {}: {e}", t.id.short())))?;
        }
        let addr = self.stores.artifacts.put_json(suite, MediaType::Suite)?;
        self.state.suite_refs.push(addr.clone());
        Ok(addr)
    }

    fn execute(&mut self, suite: &TestSuite) -> Result<ExecutionReport, OrchestratorError> {
        self.state.phase = LoopState::Executing;
        self.send(AgentRole::Orchestrator, "execute-request", json!({"tests": suite.len()}))?;
        self.count(AgentRole::Execution, 1);
        match self.agents.execution.execute_suite(suite) {
            Ok(r) => Ok(r),
            Err(e) if e.is_transient() => {
                self.event(AgentRole::Execution, "execution-retry", e.to_string(), json!({}))?;
                self.count(AgentRole::Execution, 1);
                Ok(self.agents.execution.execute_suite(suite)?)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// One execute, analyze, decide and (on Continue) refine pass.
    pub fn step_iteration(&mut self, suite: TestSuite) -> Result<StepResult, OrchestratorError> {
        if suite.project_ref != self.config.project_ref {
            return Err(OrchestratorError::Integrity(format!(
                "suite belongs to `{}`, run is `{}`",
                suite.project_ref, self.config.project_ref
            )));
        }
        let suite_ref = self.persist_suite(&suite)?;
        let report = self.execute(&suite)?;
        let doc_ref = self.stores.artifacts.put_json(&report.document, MediaType::ResultDocument)?;
        let mut metrics = compute_metrics(
            self.state.iteration,
            &suite,
            &report.outcomes,
            &report.coverage,
            report.wall_time_s,
        )?;
        self.send(
            AgentRole::Execution,
            "results",
            json!({"suite": suite_ref.to_string(), "document": doc_ref.to_string()}),
        )?;
        self.event(
            AgentRole::Execution,
            "executed",
            "suite executed in sandbox",
            json!({
                "passing": metrics.counts.passing,
                "failing": metrics.counts.failing,
                "erroring": metrics.counts.erroring,
                "skipped": metrics.counts.skipped,
            }),
        )?;

        self.state.phase = LoopState::Analyzing;
        self.count(AgentRole::Review, 1);
        let bundle = self.agents.review.analyze_results(
            &suite,
            &report.outcomes,
            &report.coverage,
            self.stores,
            &mut self.state.repeats,
        )?;
        let bundle_ref = self.stores.artifacts.put_json(&bundle, MediaType::Feedback)?;
        self.stores
            .memory
            .remember(MemoryKind::Feedback, &feedback_text(&bundle), Some(bundle_ref.clone()), self.state.iteration)?;
        self.send(AgentRole::Review, "feedback", json!({"bundle": bundle_ref.to_string()}))?;
        for (id, cause) in &bundle.root_causes {
            self.event(
                AgentRole::Review,
                "root-cause",
                cause.hypothesis.clone(),
                json!({"test_id": id, "category": cause.category, "cited": cause.cited}),
            )?;
        }
        for d in &bundle.directives {
            self.event(
                AgentRole::Review,
                "directive",
                d.rationale.clone(),
                json!({
                    "test_id": d.test_id,
                    "action": d.action,
                    "priority": d.priority,
                    "context_refs": d.context_refs,
                }),
            )?;
        }
        for u in &bundle.ignored_risk_units {
            self.event(
                AgentRole::Review,
                "warning",
                format!("risk map names unknown unit `{u}`; ignored"),
                json!({}),
            )?;
        }

        metrics.counts.agent_invocations = std::mem::take(&mut self.state.pending_invocations);
        self.stores.metrics.record(&self.config.run_id, &metrics)?;
        self.state.history.push(metrics.clone());
        self.event(
            AgentRole::Orchestrator,
            "metrics",
            format!(
                "C={:.4} F={:.4} T={:.3}s",
                metrics.coverage, metrics.failure_rate, metrics.runtime_s
            ),
            serde_json::to_value(&metrics).expect("metrics serialize"),
        )?;
        self.event(AgentRole::Orchestrator, ITERATION_END, "iteration complete", json!({}))?;

        self.state.phase = LoopState::Deciding;
        let stop = self.poll_calibration()?;
        self.count(AgentRole::Orchestrator, 1);
        let decision = match check_convergence(&self.state.history, &self.state.policy)? {
            _ if stop => StepDecision::OperatorStop,
            ConvergenceDecision::Converged => StepDecision::Converged,
            ConvergenceDecision::Exhausted => StepDecision::Exhausted,
            ConvergenceDecision::Continue => StepDecision::Continue,
        };
        let p = &self.state.policy;
        self.event(
            AgentRole::Orchestrator,
            "decision",
            format!(
                "{decision:?}: C={:.4} (need >= {}), F={:.4} (need <= {}), iteration {}/{}",
                metrics.coverage,
                p.coverage_threshold,
                metrics.failure_rate,
                p.failure_threshold,
                self.state.iteration,
                p.max_iterations
            ),
            json!({"decision": decision}),
        )?;
        if decision != StepDecision::Continue {
            return Ok(StepResult {
                metrics,
                bundle,
                decision,
                refined: suite,
            });
        }

        self.state.phase = LoopState::Refining;
        let refined = self.refine(&suite, &bundle, &metrics)?;
        if let Some(w) = self.config.memory_window {
            let removed = self.stores.memory.prune(w)?;
            if removed > 0 {
                self.event(
                    AgentRole::Orchestrator,
                    "memory-pruned",
                    format!("rolling window W={} N={}", w.window_iterations, w.max_records),
                    json!({"removed": removed}),
                )?;
            }
        }
        self.state.iteration += 1;
        self.state.phase = LoopState::Generating;
        Ok(StepResult {
            metrics,
            bundle,
            decision,
            refined,
        })
    }

    fn refine(
        &mut self,
        suite: &TestSuite,
        bundle: &FeedbackBundle,
        metrics: &IterationMetrics,
    ) -> Result<TestSuite, OrchestratorError> {
        let gap_fill = if metrics.coverage < self.state.policy.coverage_threshold {
            self.config.gap_fill_budget
        } else {
            0
        };
        if self.config.full_regeneration {
            for f in &bundle.failures {
                self.state.retired_ids.insert(f.test_id.clone());
            }
            let ctx = GenerationContext {
                coverage_gaps: bundle.coverage_gaps.clone(),
                targets: bundle.target_order.clone(),
                ..Default::default()
            };
            self.state.iteration += 1;
            let exclude = self.state.retired_ids.clone();
            let out = self.generate_into(&ctx, self.config.initial_budget + gap_fill, &exclude, "full regeneration");
            self.state.iteration -= 1;
            return out;
        }
        self.count(AgentRole::Review, 1);
        let ctx = RefineContext {
            project_ref: &self.config.project_ref,
            now: self.config.clock.now(),
            seed: derive_seed(self.config.seed, u64::from(self.state.iteration + 1)),
            retired_ids: &self.state.retired_ids,
            retired_refs: &self.state.retired_refs,
            gap_fill_budget: gap_fill,
        };
        let out = self
            .agents
            .review
            .refine_tests(suite, bundle, self.agents.generation, self.stores, &ctx)?;
        self.count(AgentRole::Generation, out.generation_calls);
        for (old, new) in &out.replaced {
            self.state.repeats.link(old, new);
            self.state.retired_ids.insert(old.clone());
            let action = bundle
                .directives
                .iter()
                .find(|d| &d.test_id == old)
                .map(|d| d.action);
            self.stores.artifacts.put_json(
                &json!({"from": old, "to": new, "iteration": suite.iteration + 1, "action": action}),
                MediaType::Lineage,
            )?;
        }
        for id in &out.discarded {
            self.state.retired_ids.insert(id.clone());
            if let Some(r) = suite.get(id).and_then(|t| t.metadata.source_ref.clone()) {
                self.state.retired_refs.insert(r);
            }
        }
        for q in &out.quarantined {
            self.stores.artifacts.put_json(q, MediaType::Quarantine)?;
        }
        for (id, err) in &out.repair_errors {
            self.event(
                AgentRole::Review,
                "repair-failed",
                err.clone(),
                json!({"test_id": id}),
            )?;
        }
        self.send(
            AgentRole::Review,
            "refined-suite",
            json!({"tests": out.suite.len()}),
        )?;
        self.event(
            AgentRole::Review,
            "refined",
            "directives applied",
            json!({
                "replaced": out.replaced.len(),
                "discarded": out.discarded.len(),
                "generated": out.generated.len(),
                "tests": out.suite.len(),
            }),
        )?;
        Ok(out.suite)
    }

    fn finish(&mut self, reason: TerminationReason, failure: Option<LoopFailure>) -> Result<LoopReport, OrchestratorError> {
        self.state.phase = LoopState::Terminated;
        let report = LoopReport {
            run_id: self.config.run_id.clone(),
            converged: reason == TerminationReason::Converged,
            iterations_executed: self.state.history.len() as u32,
            metrics_history: self.state.history.clone(),
            final_suite_ref: self.state.suite_refs.last().cloned(),
            suite_refs: self.state.suite_refs.clone(),
            termination_reason: reason,
            agent_invocation_totals: self.state.invocations.clone(),
            failure: failure.clone(),
        };
        self.stores.artifacts.put_json(&report, MediaType::LoopReport)?;
        self.event(
            AgentRole::Orchestrator,
            "run-end",
            match &failure {
                Some(f) => format!("{reason:?}: {}", f.message),
                None => format!("{reason:?}"),
            },
            json!({"iterations_executed": report.iterations_executed}),
        )?;
        Ok(report)
    }

    /// Runs to termination. Configuration and trace failures are returned
    /// as errors; any other failure ends the run with a partial report.
    pub fn run(mut self) -> Result<LoopReport, OrchestratorError> {
        self.event(
            AgentRole::Orchestrator,
            "run-start",
            format!("project {}", self.config.project_ref),
            json!({"policy": self.state.policy, "seed": self.config.seed}),
        )?;
        match self.drive() {
            Ok(reason) => self.finish(reason, None),
            Err(e @ OrchestratorError::Trace(_)) => Err(e),
            Err(e) => {
                let kind = match &e {
                    OrchestratorError::Execution(x) if x.is_sandbox_failure() => FailureKind::Sandbox,
                    _ => FailureKind::Operational,
                };
                self.finish(
                    TerminationReason::Error,
                    Some(LoopFailure {
                        kind,
                        message: e.to_string(),
                    }),
                )
            }
        }
    }

    fn drive(&mut self) -> Result<TerminationReason, OrchestratorError> {
        let mut suite = self.generate_initial()?;
        loop {
            let step = self.step_iteration(suite)?;
            match step.decision {
                StepDecision::Continue => suite = step.refined,
                StepDecision::Converged => return Ok(TerminationReason::Converged),
                StepDecision::Exhausted => return Ok(TerminationReason::Exhausted),
                StepDecision::OperatorStop => return Ok(TerminationReason::OperatorStop),
            }
        }
    }
}

fn feedback_text(b: &FeedbackBundle) -> String {
    let mut s = format!("iteration {} feedback:", b.iteration);
    for f in &b.failures {
        s.push_str(&format!(" {:?} {};", f.failure_class, f.hypothesis));
    }
    for (unit, gaps) in &b.coverage_gaps {
        s.push_str(&format!(" {unit} misses {} statements;", gaps.len()));
    }
    if b.failures.is_empty() && b.coverage_gaps.is_empty() {
        s.push_str(" clean");
    }
    s
}

pub fn run_loop(
    config: LoopConfig,
    agents: Agents<'_>,
    stores: &Stores,
    trace: &TraceLog,
    transport: &dyn Transport,
) -> Result<LoopReport, OrchestratorError> {
    Orchestrator::new(config, agents, stores, trace, transport)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::FailureClassifier;
    use crate::harness::{SyntheticGenerator, SyntheticRunner, SyntheticScenario};
    use crate::review::ReviewConfig;

    #[test]
    fn calibration_outside_a_boundary_is_rejected() {
        let s = SyntheticScenario::h1();
        let (g, x) = (SyntheticGenerator::new(s.clone()), SyntheticRunner::new(s));
        let (stores, trace, bus) = (Stores::in_memory(16), TraceLog::in_memory(), InProcessBus::new());
        let review = ReviewAgent::new(FailureClassifier::python(), ReviewConfig::default()).unwrap();
        let mut o = Orchestrator::new(
            LoopConfig::new("r", "h1"),
            Agents {
                generation: &g,
                execution: &x,
                review,
            },
            &stores,
            &trace,
            &bus,
        )
        .unwrap();
        let ok = CalibrationOverride::default();
        for phase in [LoopState::Executing, LoopState::Analyzing, LoopState::Refining, LoopState::Terminated] {
            o.state.phase = phase;
            assert!(matches!(o.apply_calibration(&ok), Err(OrchestratorError::NotAtBoundary(p)) if p == phase));
        }
        o.state.phase = LoopState::Deciding;
        o.apply_calibration(&ok).unwrap();
    }
}
