//! Synthetic target, generator and runner for hermetic loop runs and
//! seeded convergence studies.
//!
//! Scenario file:
//!
//! ```yaml
//! name: h1
//! units:
//!   - {name: u0, statements: 10}
//! initial_suite:
//!   - {unit: u0}                          # covers every statement
//!   - {unit: u0, covers: [1, "3-5"], defect: syntax}
//! repair_probability: 1.0                 # p
//! generation_validity: 1.0                # q
//! seed: 7
//! test_duration_ms: 10
//! ```
//!
//! `defect` is one of `none`, `syntax`, `environment`, `wrong-assertion`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::classify::FailureClassifier;
use crate::execution::coverage::{NativeCoverage, NativeUnit};
use crate::execution::protocol::{ResultEntry, RunnerResultDocument};
use crate::execution::sandbox::complete_outcomes;
use crate::execution::{ExecutionAgent, ExecutionError, ExecutionReport};
use crate::generation::{annotate_metadata, GenerationAgent, GenerationError, GenerationOutput, GenerationRequest, RepairRequest};
use crate::memory::Stores;
use crate::metrics::ConvergencePolicy;
use crate::model::{AgentRole, Phase, TestCase, TestId, TestMetadata, TestSuite, Verdict};
use crate::orchestrator::{run_loop, Agents, Clock, InProcessBus, LoopConfig, LoopReport, TerminationReason, TraceLog};
use crate::review::{RepairAction, ReviewAgent, ReviewConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("scenario file: {0}")]
    Read(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    #[default]
    None,
    Syntax,
    Environment,
    WrongAssertion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUnit {
    pub name: String,
    pub statements: u32,
}

/// A statement id or an inclusive `"a-b"` range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoverSpec {
    One(u32),
    Range(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub unit: String,
    /// Omitted means every statement of the unit.
    #[serde(default)]
    pub covers: Option<Vec<CoverSpec>>,
    #[serde(default)]
    pub defect: DefectKind,
}

fn default_q() -> f64 {
    0.64
}
fn default_duration() -> f64 {
    10.0
}
fn default_name() -> String {
    "scenario".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub units: Vec<SyntheticUnit>,
    pub initial_suite: Vec<TestSpec>,
    pub repair_probability: f64,
    #[serde(default = "default_q")]
    pub generation_validity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub test_duration_ms: f64,
}

fn expand(specs: &[CoverSpec]) -> Result<BTreeSet<u32>, String> {
    let mut out = BTreeSet::new();
    for s in specs {
        match s {
            CoverSpec::One(n) => {
                out.insert(*n);
            }
            CoverSpec::Range(r) => {
                let (a, b) = r
                    .split_once('-')
                    .and_then(|(a, b)| Some((a.trim().parse::<u32>().ok()?, b.trim().parse::<u32>().ok()?)))
                    .ok_or_else(|| format!("bad statement range `{r}`"))?;
                out.extend(a..=b);
            }
        }
    }
    Ok(out)
}

impl SyntheticScenario {
    pub fn from_yaml(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_yaml::from_str(text).map_err(|e| ScenarioError::Invalid(vec![e.to_string()]))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Read(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut v = Vec::new();
        for (name, x) in [
            ("repair_probability", self.repair_probability),
            ("generation_validity", self.generation_validity),
        ] {
            if !(0.0..=1.0).contains(&x) {
                v.push(format!("{name} {x} outside [0, 1]"));
            }
        }
        if self.units.is_empty() {
            v.push("no units".into());
        }
        let mut seen = BTreeSet::new();
        for u in &self.units {
            if u.statements < 1 {
                v.push(format!("unit `{}` has no statements", u.name));
            }
            if !seen.insert(u.name.as_str()) {
                v.push(format!("duplicate unit `{}`", u.name));
            }
        }
        for (i, t) in self.initial_suite.iter().enumerate() {
            match self.statements(&t.unit) {
                None => v.push(format!("initial test {i} targets unknown unit `{}`", t.unit)),
                Some(n) => match t.covers.as_deref().map(expand).transpose() {
                    Err(e) => v.push(format!("initial test {i}: {e}")),
                    Ok(Some(c)) if c.iter().any(|s| *s == 0 || *s > n) => {
                        v.push(format!("initial test {i} covers statements outside `{}` (1..={n})", t.unit))
                    }
                    _ => {}
                },
            }
        }
        if !(self.test_duration_ms >= 0.0) {
            v.push("test_duration_ms must be non-negative".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(v))
        }
    }

    pub fn statements(&self, unit: &str) -> Option<u32> {
        self.units.iter().find(|u| u.name == unit).map(|u| u.statements)
    }

    pub fn initial_tests(&self) -> Vec<SyntheticTest> {
        self.initial_suite
            .iter()
            .enumerate()
            .map(|(i, t)| SyntheticTest {
                unit: t.unit.clone(),
                covers: match &t.covers {
                    Some(c) => expand(c).expect("validated"),
                    None => (1..=self.statements(&t.unit).unwrap_or(0)).collect(),
                },
                defect: t.defect,
                label: format!("init-{i}"),
                revision: 0,
            })
            .collect()
    }

    /// Ten single-statement-set units, one test each covering its unit,
    /// three of them defective (one of each kind).
    pub fn h1() -> Self {
        let units: Vec<SyntheticUnit> = (0..10)
            .map(|i| SyntheticUnit {
                name: format!("u{i}"),
                statements: 10,
            })
            .collect();
        let defects = [DefectKind::Syntax, DefectKind::Environment, DefectKind::WrongAssertion];
        let initial_suite = (0..10)
            .map(|i| TestSpec {
                unit: format!("u{i}"),
                covers: None,
                defect: if i < 3 { defects[i] } else { DefectKind::None },
            })
            .collect();
        SyntheticScenario {
            name: "h1".into(),
            units,
            initial_suite,
            repair_probability: 1.0,
            generation_validity: 1.0,
            seed: 7,
            test_duration_ms: 10.0,
        }
    }
}

/// The synthetic stand-in for a test file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTest {
    pub unit: String,
    pub covers: BTreeSet<u32>,
    pub defect: DefectKind,
    pub label: String,
    pub revision: u32,
}

const HEADER: &str = "# synthetic test\n";

impl SyntheticTest {
    pub fn encode(&self) -> String {
        format!(
            "{HEADER}{}\nassert synthetic\n",
            serde_json::to_string(self).expect("synthetic test serializes")
        )
    }

    pub fn decode(text: &str) -> Option<Self> {
        let body = text.strip_prefix(HEADER)?;
        serde_json::from_str(body.lines().next()?).ok()
    }

    pub fn id(&self) -> TestId {
        TestId::of_source(&self.encode())
    }
}

fn random_defect(rng: &mut impl Rng) -> DefectKind {
    [DefectKind::Syntax, DefectKind::Environment, DefectKind::WrongAssertion][rng.gen_range(0..3)]
}

/// With probability `p` the defect clears. Regenerate also redraws the
/// covered set as a same-size random subset of the unit.
pub fn synth_repair(
    test: &SyntheticTest,
    action: RepairAction,
    p: f64,
    unit_statements: u32,
    rng: &mut impl Rng,
) -> SyntheticTest {
    let mut t = test.clone();
    t.revision += 1;
    if rng.gen_bool(p) {
        t.defect = DefectKind::None;
    }
    if action == RepairAction::Regenerate && unit_statements > 0 {
        let n = t.covers.len().min(unit_statements as usize);
        t.covers = sample(rng, unit_statements as usize, n)
            .into_iter()
            .map(|i| i as u32 + 1)
            .collect();
    }
    t
}

fn entry(id: &TestId, t: &SyntheticTest, duration_ms: f64) -> ResultEntry {
    let (verdict, phase, message) = match t.defect {
        DefectKind::None => (Verdict::Pass, Phase::Call, String::new()),
        DefectKind::Syntax => (
            Verdict::Error,
            Phase::Collect,
            format!("E   File \"test_{}.py\", line 3\nSyntaxError: invalid syntax", t.label),
        ),
        DefectKind::Environment => (
            Verdict::Error,
            Phase::Setup,
            format!("ModuleNotFoundError: No module named '{}_fixture'", t.unit),
        ),
        DefectKind::WrongAssertion => (
            Verdict::Fail,
            Phase::Call,
            format!("AssertionError: expected 5, got 4 in {}", t.unit),
        ),
    };
    ResultEntry {
        id: id.to_string(),
        verdict,
        duration_ms,
        message,
        phase,
    }
}

/// Fake runner. Pass and Fail contribute their covered statements; collect
/// and setup errors contribute none.
pub fn synth_execute(scenario: &SyntheticScenario, tests: &[(TestId, SyntheticTest)]) -> RunnerResultDocument {
    let mut doc = RunnerResultDocument::empty(0);
    doc.runner.name = Some("synthetic".into());
    let mut covered: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for (id, t) in tests {
        let e = entry(id, t, scenario.test_duration_ms);
        if matches!(e.verdict, Verdict::Pass | Verdict::Fail) {
            let limit = scenario.statements(&t.unit).unwrap_or(0);
            covered
                .entry(t.unit.as_str())
                .or_default()
                .extend(t.covers.iter().filter(|s| **s >= 1 && **s <= limit));
        }
        doc.tests.push(e);
    }
    if !tests.is_empty() {
        let mut cov = NativeCoverage::default();
        for u in &scenario.units {
            cov.units.insert(
                u.name.clone(),
                NativeUnit {
                    total_statements: u64::from(u.statements),
                    covered_statement_ids: covered.get(u.name.as_str()).map(|c| c.iter().copied().collect()).unwrap_or_default(),
                    missing_statement_ids: None,
                    total_branches: None,
                    covered_branches: None,
                },
            );
        }
        doc.coverage = Some(cov);
    }
    doc
}

#[derive(Debug, Clone)]
pub struct SyntheticRunner {
    scenario: SyntheticScenario,
}

impl SyntheticRunner {
    pub fn new(scenario: SyntheticScenario) -> Self {
        SyntheticRunner { scenario }
    }
}

impl ExecutionAgent for SyntheticRunner {
    fn execute_suite(&self, suite: &TestSuite) -> Result<ExecutionReport, ExecutionError> {
        let decoded: Vec<(TestId, SyntheticTest)> = suite
            .tests
            .iter()
            .filter_map(|t| SyntheticTest::decode(&t.source_text).map(|s| (t.id.clone(), s)))
            .collect();
        let doc = synth_execute(&self.scenario, &decoded);
        let entries: HashMap<String, ResultEntry> = doc.tests.iter().map(|e| (e.id.clone(), e.clone())).collect();
        let outcomes = complete_outcomes(suite, &entries, &HashMap::new(), 0.0);
        let coverage = match &doc.coverage {
            Some(c) => c.to_map()?,
            None => Default::default(),
        };
        let wall_time_s = doc.tests.iter().map(|e| e.duration_ms).sum::<f64>() / 1000.0;
        Ok(ExecutionReport {
            outcomes,
            coverage,
            wall_time_s,
            document: doc,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    scenario: SyntheticScenario,
}

impl SyntheticGenerator {
    pub fn new(scenario: SyntheticScenario) -> Self {
        SyntheticGenerator { scenario }
    }

    fn to_case(&self, t: &SyntheticTest, origin: AgentRole, rationale: &str, iteration: u32, now: chrono::DateTime<chrono::Utc>, lineage: Option<TestId>) -> Result<TestCase, GenerationError> {
        let total = self.scenario.statements(&t.unit).unwrap_or(1).max(1);
        let meta = TestMetadata {
            target_module: t.unit.clone(),
            mock_dependencies: Vec::new(),
            coverage_estimate: 0.0,
            origin_agent: origin,
            rationale: String::new(),
            timestamp: now,
            iteration_created: iteration,
            lineage,
            source_ref: Some(format!("{}#{}", t.unit, t.label)),
        };
        let estimate = (t.covers.len() as f64 / f64::from(total)).min(1.0);
        annotate_metadata(TestCase::new(t.unit.clone(), t.encode(), meta), origin, rationale, estimate, now)
    }

    fn repair(&self, req: &RepairRequest<'_>, action: RepairAction) -> Result<TestCase, GenerationError> {
        let t = SyntheticTest::decode(&req.test.source_text)
            .ok_or_else(|| GenerationError::UnknownSource(req.test.id.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(req.seed, &req.test.id));
        let n = self.scenario.statements(&t.unit).unwrap_or(0);
        let fixed = synth_repair(&t, action, self.scenario.repair_probability, n, &mut rng);
        let rationale = format!("{action:?} of {}: {}", req.test.id.short(), req.rationale);
        self.to_case(&fixed, AgentRole::Review, &rationale, req.iteration, req.now, Some(req.test.id.clone()))
    }
}

fn stream_seed(seed: u64, id: &TestId) -> u64 {
    let head = u64::from_str_radix(&id.as_str()[..16.min(id.as_str().len())], 16).unwrap_or(0);
    seed ^ head.rotate_left(17)
}

impl GenerationAgent for SyntheticGenerator {
    /// Without targets this emits the scenario's initial suite. With
    /// targets it writes one fresh test per unit covering that unit's gaps
    /// (or the whole unit), well-formed with probability q.
    fn generate_tests(&self, req: &GenerationRequest<'_>) -> Result<GenerationOutput, GenerationError> {
        if req.budget == 0 {
            return Err(GenerationError::Budget);
        }
        let mut out = GenerationOutput::default();
        if req.context.targets.is_empty() && !req.targets_only {
            for t in self.scenario.initial_tests().into_iter().take(req.budget) {
                let case = self.to_case(&t, AgentRole::Generation, "initial synthetic suite", req.iteration, req.now, None)?;
                if req.exclude_ids.contains(&case.id) {
                    out.duplicates.push(case.id);
                } else {
                    out.tests.push(case);
                }
            }
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        for (k, (unit, w)) in req.context.targets.iter().enumerate() {
            if out.tests.len() >= req.budget {
                break;
            }
            let Some(n) = self.scenario.statements(unit) else { continue };
            let covers: BTreeSet<u32> = match req.context.coverage_gaps.get(unit) {
                Some(g) if !g.is_empty() => g.clone(),
                _ => (1..=n).collect(),
            };
            let defect = if rng.gen_bool(self.scenario.generation_validity) {
                DefectKind::None
            } else {
                random_defect(&mut rng)
            };
            let t = SyntheticTest {
                unit: unit.clone(),
                covers,
                defect,
                label: format!("g{:016x}-{k}", req.seed),
                revision: 0,
            };
            let rationale = format!("fresh test for {unit} (weight {w:.3})");
            let case = self.to_case(&t, AgentRole::Generation, &rationale, req.iteration, req.now, None)?;
            if req.exclude_ids.contains(&case.id) {
                out.duplicates.push(case.id);
            } else {
                out.tests.push(case);
            }
        }
        Ok(out)
    }

    fn patch(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError> {
        self.repair(req, RepairAction::Patch)
    }

    fn regenerate(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError> {
        self.repair(req, RepairAction::Regenerate)
    }
}

/// Loop knobs shared by every simulated run.
#[derive(Debug, Clone)]
pub struct SimulationSettings {
    pub policy: ConvergencePolicy,
    pub review: ReviewConfig,
    pub gap_fill_budget: usize,
    pub memory_dimension: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            policy: ConvergencePolicy::default(),
            review: ReviewConfig::default(),
            gap_fill_budget: 4,
            memory_dimension: 64,
        }
    }
}

/// One hermetic loop run against the synthetic agents with in-memory
/// stores.
pub fn run_synthetic(
    scenario: &SyntheticScenario,
    settings: &SimulationSettings,
    seed: u64,
    run_id: &str,
) -> Result<(LoopReport, Stores, TraceLog), crate::orchestrator::OrchestratorError> {
    let stores = Stores::in_memory(settings.memory_dimension);
    let trace = TraceLog::in_memory();
    let bus = InProcessBus::new();
    let generator = SyntheticGenerator::new(scenario.clone());
    let runner = SyntheticRunner::new(scenario.clone());
    let review = ReviewAgent::new(FailureClassifier::python(), settings.review.clone())?;
    let mut config = LoopConfig::new(run_id, scenario.name.clone());
    config.policy = settings.policy.clone();
    config.seed = seed;
    config.initial_budget = scenario.initial_suite.len().max(1);
    config.gap_fill_budget = settings.gap_fill_budget;
    config.clock = Clock::Fixed(chrono::DateTime::from_timestamp(1_767_225_600, 0).expect("valid instant"));
    let report = run_loop(
        config,
        Agents {
            generation: &generator,
            execution: &runner,
            review,
        },
        &stores,
        &trace,
        &bus,
    )?;
    Ok((report, stores, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub runs: usize,
    pub seed: u64,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Quantiles of iterations-to-convergence over converged runs.
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    /// Per run: iterations to convergence, or None when it did not converge.
    pub iterations: Vec<Option<u32>>,
    pub terminations: BTreeMap<String, usize>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Runs `n` independent loops with seeds `seed + i`, in parallel.
pub fn simulate_runs(
    scenario: &SyntheticScenario,
    settings: &SimulationSettings,
    n: usize,
    seed: u64,
) -> Result<SimulationReport, ScenarioError> {
    if n == 0 {
        return Err(ScenarioError::Invalid(vec!["runs must be at least 1".into()]));
    }
    scenario.validate()?;
    let results: Vec<Result<LoopReport, String>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            run_synthetic(scenario, settings, s, &format!("sim-{i}"))
                .map(|(r, _, _)| r)
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut iterations = Vec::with_capacity(n);
    let mut terminations: BTreeMap<String, usize> = BTreeMap::new();
    for r in &results {
        match r {
            Ok(rep) => {
                *terminations.entry(format!("{:?}", rep.termination_reason)).or_default() += 1;
                iterations.push((rep.termination_reason == TerminationReason::Converged).then_some(rep.iterations_executed));
            }
            Err(_) => {
                *terminations.entry("Error".into()).or_default() += 1;
                iterations.push(None);
            }
        }
    }
    let mut conv: Vec<f64> = iterations.iter().flatten().map(|k| f64::from(*k)).collect();
    conv.sort_by(f64::total_cmp);
    Ok(SimulationReport {
        scenario: scenario.name.clone(),
        runs: n,
        seed,
        converged: conv.len(),
        convergence_rate: conv.len() as f64 / n as f64,
        median: quantile(&conv, 0.5),
        q1: quantile(&conv, 0.25),
        q3: quantile(&conv, 0.75),
        iterations,
        terminations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h1_first_execution_matches_hand_count() {
        let s = SyntheticScenario::h1();
        let tests: Vec<_> = s.initial_tests().into_iter().map(|t| (t.id(), t)).collect();
        let doc = synth_execute(&s, &tests);
        let count = |v| doc.tests.iter().filter(|e| e.verdict == v).count();
        assert_eq!((count(Verdict::Pass), count(Verdict::Fail), count(Verdict::Error)), (7, 1, 2));
        let cov = doc.coverage.unwrap().to_map().unwrap();
        assert!((cov.statement_fraction() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn empty_suite_gives_empty_document() {
        let doc = synth_execute(&SyntheticScenario::h1(), &[]);
        assert!(doc.tests.is_empty());
        assert!(doc.coverage.unwrap().units.is_empty());
    }

    #[test]
    fn repair_probability_extremes_and_rate() {
        let t = SyntheticTest {
            unit: "u".into(),
            covers: (1..=4).collect(),
            defect: DefectKind::Syntax,
            label: "x".into(),
            revision: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| synth_repair(&t, RepairAction::Patch, 1.0, 10, &mut rng).defect == DefectKind::None));
        assert!((0..100).all(|_| synth_repair(&t, RepairAction::Patch, 0.0, 10, &mut rng).defect == DefectKind::Syntax));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ok = (0..1000)
            .filter(|_| synth_repair(&t, RepairAction::Patch, 0.6, 10, &mut rng).defect == DefectKind::None)
            .count();
        assert!((ok as f64 / 1000.0 - 0.6).abs() <= 0.05, "{ok}");
        let r = synth_repair(&t, RepairAction::Regenerate, 1.0, 10, &mut rng);
        assert_eq!(r.covers.len(), 4);
        assert!(r.covers.iter().all(|s| (1..=10).contains(s)));
    }

    #[test]
    fn encode_round_trip() {
        let t = SyntheticScenario::h1().initial_tests().remove(0);
        assert_eq!(SyntheticTest::decode(&t.encode()), Some(t));
    }

    #[test]
    fn scenario_validation() {
        let mut s = SyntheticScenario::h1();
        s.repair_probability = 1.5;
        s.initial_suite[0].covers = Some(vec![CoverSpec::Range("5-11".into())]);
        let ScenarioError::Invalid(errs) = s.validate().unwrap_err() else { panic!() };
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert_eq!(expand(&[CoverSpec::One(1), CoverSpec::Range("3-5".into())]).unwrap(), BTreeSet::from([1, 3, 4, 5]));
    }
}
