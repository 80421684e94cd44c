//! Review agent: classifies failures, infers root causes, plans per-test
//! repair directives, orders target units by reward and applies directives
//! to produce the next suite.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::classify::{ClassifyError, FailureClassifier};
use crate::generation::{GenerationAgent, GenerationContext, GenerationError, GenerationRequest, RepairRequest};
use crate::memory::{MediaType, MemoryKind, StoreError, Stores};
use crate::metrics::RewardWeights;
use crate::model::{CoverageMap, ExecutionOutcome, FailureClass, FailureRecord, TestCase, TestId, TestSuite, Verdict};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("outcome for test {0} that is not in the suite")]
    UnknownOutcome(TestId),
    #[error("test {0} has no outcome")]
    MissingOutcome(TestId),
    #[error("directive references test {0} that is not in the suite")]
    UnknownTest(TestId),
    #[error("risk for unit `{unit}` is {value}, outside [0, 1]")]
    RiskOutOfRange { unit: String, value: f64 },
    #[error("invalid reward weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairAction {
    Patch,
    Regenerate,
    Discard,
}

/// The repair decision table. Total over class × repeat count.
pub fn decide_action(class: FailureClass, repeat_count: u32, discard_after: u32) -> RepairAction {
    if repeat_count >= discard_after {
        return RepairAction::Discard;
    }
    match class {
        FailureClass::Syntax => RepairAction::Regenerate,
        FailureClass::Environment | FailureClass::LogicAssertion => RepairAction::Patch,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementDirective {
    pub test_id: TestId,
    pub unit: String,
    pub action: RepairAction,
    pub context_refs: Vec<String>,
    pub priority: f64,
    pub rationale: String,
}

/// Replacement generation owed to a unit after one of its tests was
/// discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreshGeneration {
    pub unit: String,
    pub priority: f64,
    pub replaces: TestId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootCauseCategory {
    #[serde(rename = "data-level")]
    DataLevel,
    #[serde(rename = "logic-level")]
    LogicLevel,
    #[serde(rename = "environment-level")]
    EnvironmentLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub category: RootCauseCategory,
    pub hypothesis: String,
    /// Memory record the hypothesis draws on, when one was similar enough.
    pub cited: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub iteration: u32,
    pub failures: Vec<FailureRecord>,
    pub root_causes: BTreeMap<TestId, RootCause>,
    pub coverage_gaps: BTreeMap<String, BTreeSet<u32>>,
    pub directives: Vec<RefinementDirective>,
    pub fresh_generation: Vec<FreshGeneration>,
    pub target_order: Vec<(String, f64)>,
    /// Memory records written while analyzing this iteration.
    pub memory_refs: Vec<String>,
    /// Risk-map units absent from the coverage map.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignored_risk_units: Vec<String>,
}

impl FeedbackBundle {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty() && self.directives.is_empty()
    }
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
pub struct ReviewConfig {
    #[serde(default)]
    pub weights: RewardWeights,
    /// Operator-declared risk per unit, each in [0, 1]; absent units are 0.
    #[serde(default)]
    pub risk: BTreeMap<String, f64>,
    #[serde(default = "default_discard_after")]
    pub discard_after: u32,
    /// Memory records retrieved as repair context per directive.
    #[serde(default = "default_context_k")]
    pub context_k: usize,
    #[serde(default = "default_citation")]
    pub citation_similarity: f64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            weights: RewardWeights::default(),
            risk: BTreeMap::new(),
            discard_after: default_discard_after(),
            context_k: default_context_k(),
            citation_similarity: default_citation(),
        }
    }
}

/// Consecutive-failure counts keyed by lineage root, so a patched test
/// inherits the count of the test it replaced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepeatTracker {
    root_of: HashMap<TestId, TestId>,
    streak: HashMap<TestId, u32>,
}

impl RepeatTracker {
    pub fn root(&self, id: &TestId) -> TestId {
        self.root_of.get(id).cloned().unwrap_or_else(|| id.clone())
    }

    pub fn link(&mut self, old: &TestId, new: &TestId) {
        let root = self.root(old);
        self.root_of.insert(new.clone(), root);
    }

    /// Records one verdict and returns the failure streak including it.
    pub fn observe(&mut self, id: &TestId, failed: bool) -> u32 {
        let root = self.root(id);
        let s = self.streak.entry(root).or_insert(0);
        *s = if failed { *s + 1 } else { 0 };
        *s
    }

    pub fn streak(&self, id: &TestId) -> u32 {
        self.streak.get(&self.root(id)).copied().unwrap_or(0)
    }
}

/// Text under which failures are embedded and looked up.
pub fn failure_text(record: &FailureRecord, unit: &str) -> String {
    format!("{:?} failure in {unit}: {}", record.failure_class, record.signal.message)
}

/// Units with their weights, highest first.
pub type RankedUnits = Vec<(String, f64)>;

/// w = α(1 − c) + β·r per unit of the coverage map, descending, ties by
/// name. Risk entries for units not in the map are returned separately.
pub fn prioritize_targets(
    coverage: &CoverageMap,
    risk: &BTreeMap<String, f64>,
    weights: &RewardWeights,
) -> Result<(RankedUnits, Vec<String>), ReviewError> {
    weights
        .validate()
        .map_err(|v| ReviewError::Weights(v.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; ")))?;
    for (unit, r) in risk {
        if !(0.0..=1.0).contains(r) {
            return Err(ReviewError::RiskOutOfRange {
                unit: unit.clone(),
                value: *r,
            });
        }
    }
    let mut out: Vec<(String, f64)> = coverage
        .units
        .iter()
        .map(|(u, c)| {
            let r = risk.get(u).copied().unwrap_or(0.0);
            (u.clone(), weights.alpha * (1.0 - c.fraction()) + weights.beta * r)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let ignored = risk.keys().filter(|u| !coverage.units.contains_key(*u)).cloned().collect();
    Ok((out, ignored))
}

fn unit_weight(targets: &[(String, f64)], unit: &str, weights: &RewardWeights, risk: &BTreeMap<String, f64>) -> f64 {
    targets
        .iter()
        .find(|(u, _)| u == unit)
        .map(|(_, w)| *w)
        .unwrap_or_else(|| weights.alpha + weights.beta * risk.get(unit).copied().unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitFailure {
    pub record: FailureRecord,
    pub unit: String,
    /// Memory record holding this very failure, excluded from its own
    /// retrieved context.
    pub own_record: Option<String>,
}

pub struct ReviewAgent {
    classifier: FailureClassifier,
    config: ReviewConfig,
}

impl std::fmt::Debug for ReviewAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReviewAgent").field("config", &self.config).finish()
    }
}

pub struct RefineContext<'a> {
    pub project_ref: &'a str,
    pub now: DateTime<Utc>,
    pub seed: u64,
    /// Ids and backend references that must not come back.
    pub retired_ids: &'a HashSet<TestId>,
    pub retired_refs: &'a HashSet<String>,
    /// Extra tests requested for uncovered statements; 0 disables.
    pub gap_fill_budget: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RefineOutcome {
    pub suite: TestSuite,
    /// (old, new) pairs from Patch and Regenerate.
    pub replaced: Vec<(TestId, TestId)>,
    pub discarded: Vec<TestId>,
    pub generated: Vec<TestId>,
    pub quarantined: Vec<TestCase>,
    /// Directives that could not be applied; the old test is kept.
    pub repair_errors: Vec<(TestId, String)>,
    pub generation_calls: u32,
}

impl ReviewAgent {
    pub fn new(classifier: FailureClassifier, config: ReviewConfig) -> Result<Self, ReviewError> {
        prioritize_targets(&CoverageMap::new(), &config.risk, &config.weights)?;
        Ok(ReviewAgent { classifier, config })
    }

    pub fn config(&self) -> &ReviewConfig {
        &self.config
    }

    pub fn set_weights(&mut self, weights: RewardWeights) -> Result<(), ReviewError> {
        prioritize_targets(&CoverageMap::new(), &self.config.risk, &weights)?;
        self.config.weights = weights;
        Ok(())
    }

    pub fn classifier(&self) -> &FailureClassifier {
        &self.classifier
    }

    /// Category is fixed by the failure class; the hypothesis cites the most
    /// similar stored failure when the similarity reaches the threshold.
    pub fn infer_root_cause(&self, record: &FailureRecord, unit: &str, stores: &Stores) -> RootCause {
        let category = match record.failure_class {
            FailureClass::Syntax => RootCauseCategory::LogicLevel,
            FailureClass::Environment => RootCauseCategory::EnvironmentLevel,
            FailureClass::LogicAssertion if self.classifier.is_value_mismatch(&record.signal.message) => {
                RootCauseCategory::DataLevel
            }
            FailureClass::LogicAssertion => RootCauseCategory::LogicLevel,
        };
        let mut hypothesis = match category {
            RootCauseCategory::DataLevel => format!("{}; expected and actual values differ", record.hypothesis),
            _ => record.hypothesis.clone(),
        };
        if let Some(loc) = &record.signal.location {
            hypothesis.push_str(&format!(" (at {}:{})", loc.unit, loc.line));
        }
        let mut cited = None;
        if let Ok(hits) = stores.memory.recall(&failure_text(record, unit), 1, Some(MemoryKind::FailedTest)) {
            if let Some(top) = hits.first() {
                if top.similarity >= self.config.citation_similarity {
                    hypothesis.push_str(&format!(
                        "; resembles prior failure {} (similarity {:.2}): {}",
                        top.record.record_id, top.similarity, top.record.summary
                    ));
                    cited = Some(top.record.record_id.clone());
                }
            }
        }
        RootCause {
            category,
            hypothesis,
            cited,
        }
    }

    /// One directive per failure, highest priority first. Discards also
    /// schedule a fresh test for the unit.
    pub fn plan_refinement(
        &self,
        failures: &[UnitFailure],
        targets: &[(String, f64)],
        stores: &Stores,
    ) -> Result<(Vec<RefinementDirective>, Vec<FreshGeneration>), ReviewError> {
        let mut directives = Vec::with_capacity(failures.len());
        let mut fresh = Vec::new();
        for f in failures {
            let r = &f.record;
            let action = decide_action(r.failure_class, r.repeat_count, self.config.discard_after);
            let priority = unit_weight(targets, &f.unit, &self.config.weights, &self.config.risk);
            let mut context_refs = Vec::new();
            if action != RepairAction::Discard && self.config.context_k > 0 {
                let hits = stores
                    .memory
                    .recall(&failure_text(r, &f.unit), self.config.context_k + 1, None)?;
                context_refs = hits
                    .into_iter()
                    .map(|h| h.record.record_id)
                    .filter(|id| Some(id) != f.own_record.as_ref())
                    .take(self.config.context_k)
                    .collect();
            }
            let rationale = match action {
                RepairAction::Regenerate => format!("{:?} failure: test does not collect; regenerate", r.failure_class),
                RepairAction::Patch if r.failure_class == FailureClass::Environment => {
                    format!("Environment failure: repair declarations and dependencies ({})", r.hypothesis)
                }
                RepairAction::Patch => format!("LogicAssertion failure: repair the assertion ({})", r.hypothesis),
                RepairAction::Discard => format!(
                    "{:?} failure repeated {} times (limit {}); discard and generate afresh",
                    r.failure_class, r.repeat_count, self.config.discard_after
                ),
            };
            if action == RepairAction::Discard {
                fresh.push(FreshGeneration {
                    unit: f.unit.clone(),
                    priority,
                    replaces: r.test_id.clone(),
                });
            }
            directives.push(RefinementDirective {
                test_id: r.test_id.clone(),
                unit: f.unit.clone(),
                action,
                context_refs,
                priority,
                rationale,
            });
        }
        directives.sort_by(|a, b| b.priority.total_cmp(&a.priority).then_with(|| a.test_id.cmp(&b.test_id)));
        fresh.sort_by(|a, b| b.priority.total_cmp(&a.priority).then_with(|| a.unit.cmp(&b.unit)));
        Ok((directives, fresh))
    }

    /// Builds the feedback bundle for one iteration. Failures are written to
    /// the artifact store and semantic memory before planning, so retrieval
    /// already sees them.
    pub fn analyze_results(
        &self,
        suite: &TestSuite,
        outcomes: &[ExecutionOutcome],
        coverage: &CoverageMap,
        stores: &Stores,
        repeats: &mut RepeatTracker,
    ) -> Result<FeedbackBundle, ReviewError> {
        let by_id: HashMap<&TestId, &ExecutionOutcome> = outcomes.iter().map(|o| (&o.test_id, o)).collect();
        for o in outcomes {
            if !suite.contains(&o.test_id) {
                return Err(ReviewError::UnknownOutcome(o.test_id.clone()));
            }
        }
        let (targets, ignored) = prioritize_targets(coverage, &self.config.risk, &self.config.weights)?;
        let mut bundle = FeedbackBundle {
            iteration: suite.iteration,
            coverage_gaps: coverage.gaps(),
            target_order: targets,
            ignored_risk_units: ignored,
            ..Default::default()
        };
        let mut failures = Vec::new();
        for t in &suite.tests {
            let o = by_id.get(&t.id).ok_or_else(|| ReviewError::MissingOutcome(t.id.clone()))?;
            if o.verdict == Verdict::Skipped {
                continue;
            }
            let count = repeats.observe(&t.id, o.verdict != Verdict::Pass);
            if o.verdict == Verdict::Pass {
                continue;
            }
            let mut record = self.classifier.classify(o, count)?;
            let cause = self.infer_root_cause(&record, &t.target_unit, stores);
            record.hypothesis = cause.hypothesis.clone();
            bundle.root_causes.insert(t.id.clone(), cause);
            failures.push(UnitFailure {
                record,
                unit: t.target_unit.clone(),
                own_record: None,
            });
        }
        for f in &mut failures {
            let addr = stores.artifacts.put_json(&f.record, MediaType::FailureRecord)?;
            let id = stores.memory.remember(
                MemoryKind::FailedTest,
                &failure_text(&f.record, &f.unit),
                Some(addr),
                suite.iteration,
            )?;
            bundle.memory_refs.push(id.clone());
            f.own_record = Some(id);
        }
        let (directives, fresh) = self.plan_refinement(&failures, &bundle.target_order, stores)?;
        bundle.directives = directives;
        bundle.fresh_generation = fresh;
        bundle.failures = failures.into_iter().map(|f| f.record).collect();
        Ok(bundle)
    }

    /// Applies the bundle's directives, then any fresh and gap-filling
    /// generation. Tests without a directive are carried over unchanged.
    pub fn refine_tests(
        &self,
        suite: &TestSuite,
        bundle: &FeedbackBundle,
        generator: &dyn GenerationAgent,
        stores: &Stores,
        ctx: &RefineContext<'_>,
    ) -> Result<RefineOutcome, ReviewError> {
        for d in &bundle.directives {
            if !suite.contains(&d.test_id) {
                return Err(ReviewError::UnknownTest(d.test_id.clone()));
            }
        }
        let next_iteration = suite.iteration + 1;
        let failures: HashMap<&TestId, &FailureRecord> = bundle.failures.iter().map(|f| (&f.test_id, f)).collect();
        let mut out = RefineOutcome::default();
        let mut tests: Vec<Option<TestCase>> = suite.tests.iter().cloned().map(Some).collect();
        let index: HashMap<TestId, usize> = suite.tests.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();

        for (n, d) in bundle.directives.iter().enumerate() {
            let slot = index[&d.test_id];
            let old = tests[slot].clone().expect("directive applied twice");
            if d.action == RepairAction::Discard {
                tests[slot] = None;
                out.discarded.push(d.test_id.clone());
                continue;
            }
            let snippets = context_snippets(stores, &d.context_refs);
            let req = RepairRequest {
                test: &old,
                rationale: &d.rationale,
                context_refs: &d.context_refs,
                context_snippets: &snippets,
                failure: failures.get(&d.test_id).copied(),
                iteration: next_iteration,
                now: ctx.now,
                seed: ctx.seed.wrapping_add(n as u64),
            };
            out.generation_calls += 1;
            let repaired = match d.action {
                RepairAction::Patch => generator.patch(&req),
                _ => generator.regenerate(&req),
            };
            match repaired {
                Ok(new) if new.id != old.id && !index.contains_key(&new.id) && !ctx.retired_ids.contains(&new.id) => {
                    out.replaced.push((old.id.clone(), new.id.clone()));
                    tests[slot] = Some(new);
                }
                Ok(new) => out
                    .repair_errors
                    .push((old.id.clone(), format!("repair produced an existing test {}", new.id.short()))),
                Err(GenerationError::Cancelled) => return Err(GenerationError::Cancelled.into()),
                Err(e) => out.repair_errors.push((old.id.clone(), e.to_string())),
            }
        }

        let mut next = TestSuite::new(suite.project_ref.clone(), next_iteration);
        for t in tests.into_iter().flatten() {
            next.push_unique(t);
        }

        let mut exclude_ids: HashSet<TestId> = ctx.retired_ids.clone();
        exclude_ids.extend(suite.tests.iter().map(|t| t.id.clone()));
        exclude_ids.extend(next.tests.iter().map(|t| t.id.clone()));
        let mut exclude_refs: HashSet<String> = ctx.retired_refs.clone();
        exclude_refs.extend(suite.tests.iter().chain(&next.tests).filter_map(|t| t.metadata.source_ref.clone()));

        let mut requests: Vec<(GenerationContext, usize, bool)> = Vec::new();
        for f in &bundle.fresh_generation {
            let ctx = GenerationContext {
                coverage_gaps: bundle
                    .coverage_gaps
                    .get(&f.unit)
                    .map(|g| BTreeMap::from([(f.unit.clone(), g.clone())]))
                    .unwrap_or_default(),
                targets: vec![(f.unit.clone(), f.priority)],
                ..Default::default()
            };
            requests.push((ctx, 1, true));
        }
        if ctx.gap_fill_budget > 0 && !bundle.coverage_gaps.is_empty() {
            let gctx = GenerationContext {
                coverage_gaps: bundle.coverage_gaps.clone(),
                targets: bundle
                    .target_order
                    .iter()
                    .filter(|(u, _)| bundle.coverage_gaps.contains_key(u))
                    .cloned()
                    .collect(),
                ..Default::default()
            };
            requests.push((gctx, ctx.gap_fill_budget, true));
        }
        for (n, (gctx, budget, targets_only)) in requests.iter().enumerate() {
            let req = GenerationRequest {
                project_ref: ctx.project_ref,
                iteration: next_iteration,
                context: gctx,
                budget: *budget,
                seed: ctx.seed.wrapping_add(1_000 + n as u64),
                now: ctx.now,
                exclude_ids: &exclude_ids,
                exclude_refs: &exclude_refs,
                targets_only: *targets_only,
            };
            out.generation_calls += 1;
            let gen = generator.generate_tests(&req)?;
            for t in gen.tests {
                exclude_ids.insert(t.id.clone());
                if let Some(r) = &t.metadata.source_ref {
                    exclude_refs.insert(r.clone());
                }
                out.generated.push(t.id.clone());
                next.push_unique(t);
            }
            out.quarantined.extend(gen.quarantined);
        }
        out.suite = next;
        Ok(out)
    }
}

fn context_snippets(stores: &Stores, refs: &[String]) -> Vec<String> {
    let snap = stores.memory.snapshot();
    refs.iter()
        .filter_map(|r| snap.get(r).map(|rec| rec.summary.clone()))
        .collect()
}
