//! Deterministic template backend: one rendered test per manifest example.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::manifest::{source_ref, CallableEntry, ExamplePair, Expectation, InterfaceManifest, UnitEntry};
use super::{
    annotate_metadata, GenerationAgent, GenerationError, GenerationOutput, GenerationRequest, RepairRequest,
};
use crate::model::{AgentRole, TestCase, TestMetadata, TestStatus};

pub const PYTEST_TEMPLATE: &str = include_str!("../../data/templates/pytest.yaml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiteralStyle {
    Python,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestTemplate {
    pub dialect: String,
    pub extension: String,
    pub literal_style: LiteralStyle,
    pub indent: String,
    /// Substring every well-formed test in this dialect contains.
    pub assert_marker: String,
    pub value: String,
    pub error: String,
}

impl TestTemplate {
    pub fn pytest() -> Self {
        Self::from_yaml(PYTEST_TEMPLATE).expect("bundled pytest template parses")
    }

    pub fn from_yaml(text: &str) -> Result<Self, GenerationError> {
        serde_yaml::from_str(text).map_err(|e| GenerationError::Template(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenerationError::Template(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn literal(&self, v: &Value) -> String {
        match self.literal_style {
            LiteralStyle::Json => v.to_string(),
            LiteralStyle::Python => python_literal(v),
        }
    }
}

fn python_literal(v: &Value) -> String {
    match v {
        Value::Null => "None".into(),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => Value::String(s.clone()).to_string(),
        Value::Array(items) => format!("[{}]", items.iter().map(python_literal).collect::<Vec<_>>().join(", ")),
        Value::Object(map) => format!(
            "{{{}}}",
            map.iter()
                .map(|(k, v)| format!("{}: {}", Value::String(k.clone()), python_literal(v)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Renders one example into test source. The output always holds the
/// arrange, act and assert sections in that order.
pub fn render_test(
    template: &TestTemplate,
    unit: &UnitEntry,
    callable: &CallableEntry,
    index: usize,
    example: &ExamplePair,
) -> Result<String, GenerationError> {
    if example.inputs.len() != callable.params.len() {
        return Err(GenerationError::Render(format!(
            "{}::{} example {index}: {} inputs for {} params",
            unit.name,
            callable.name,
            example.inputs.len(),
            callable.params.len()
        )));
    }
    let arrange = if callable.params.is_empty() {
        format!("{}pass", template.indent)
    } else {
        callable
            .params
            .iter()
            .zip(&example.inputs)
            .map(|(p, v)| format!("{}{} = {}", template.indent, p.name, template.literal(v)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let args = callable.params.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join(", ");
    let (skeleton, expected, error) = match &example.expect {
        Expectation::Returns(v) => (&template.value, template.literal(v), String::new()),
        Expectation::Raises(e) => (&template.error, String::new(), e.clone()),
    };
    // {arrange} last so that literal values containing braces are not
    // re-substituted.
    Ok(skeleton
        .replace("{unit}", &unit.name)
        .replace("{module}", &unit.import_path())
        .replace("{callable}", &callable.name)
        .replace("{index}", &index.to_string())
        .replace("{args}", &args)
        .replace("{error}", &error)
        .replace("{expected}", &expected)
        .replace("{arrange}", &arrange))
}

#[derive(Debug, Clone)]
pub struct TemplateGenerator {
    manifest: InterfaceManifest,
    template: TestTemplate,
}

impl TemplateGenerator {
    pub fn new(manifest: InterfaceManifest, template: TestTemplate) -> Result<Self, GenerationError> {
        if manifest.callable_count() == 0 {
            return Err(GenerationError::EmptyManifest);
        }
        Ok(TemplateGenerator { manifest, template })
    }

    pub fn manifest(&self) -> &InterfaceManifest {
        &self.manifest
    }

    pub fn template(&self) -> &TestTemplate {
        &self.template
    }

    /// Units in target order: prioritized units first (by the order given),
    /// then the remaining manifest units in declaration order.
    fn unit_order<'a>(&'a self, req: &GenerationRequest<'_>) -> Vec<&'a UnitEntry> {
        let mut order: Vec<&UnitEntry> = Vec::new();
        for (name, _) in &req.context.targets {
            if let Some(u) = self.manifest.unit(name) {
                if !order.iter().any(|o| o.name == u.name) {
                    order.push(u);
                }
            }
        }
        if !req.targets_only {
            for u in &self.manifest.units {
                if !order.iter().any(|o| o.name == u.name) {
                    order.push(u);
                }
            }
        }
        order
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        &self,
        unit: &UnitEntry,
        callable: &CallableEntry,
        index: usize,
        source_text: String,
        rationale: String,
        req_iteration: u32,
        now: chrono::DateTime<chrono::Utc>,
        lineage: Option<crate::model::TestId>,
    ) -> Result<TestCase, GenerationError> {
        let meta = TestMetadata {
            target_module: unit.import_path(),
            mock_dependencies: callable.mock_dependencies.clone(),
            coverage_estimate: 0.0,
            origin_agent: AgentRole::Generation,
            rationale: String::new(),
            timestamp: now,
            iteration_created: req_iteration,
            lineage,
            source_ref: Some(source_ref(&unit.name, &callable.name, index)),
        };
        let test = TestCase::new(unit.name.clone(), source_text, meta);
        let estimate = self.manifest.coverage_estimate(unit, callable);
        annotate_metadata(test, AgentRole::Generation, &rationale, estimate, now)
    }

    fn repair(&self, req: &RepairRequest<'_>, verb: &str) -> Result<TestCase, GenerationError> {
        let sref = req
            .test
            .metadata
            .source_ref
            .as_deref()
            .ok_or_else(|| GenerationError::UnknownSource(req.test.id.to_string()))?;
        let (unit, callable, index, example) = self
            .manifest
            .lookup(sref)
            .ok_or_else(|| GenerationError::UnknownSource(sref.to_string()))?;
        let body = render_test(&self.template, unit, callable, index, example)?;
        let text = format!("# ata: {verb} from {}\n{body}", req.test.id.short());
        let mut rationale = format!("{verb} {sref} from the manifest example: {}", req.rationale);
        if !req.context_refs.is_empty() {
            rationale.push_str(&format!(" (context: {})", req.context_refs.join(", ")));
        }
        let mut t = self.build(
            unit,
            callable,
            index,
            text,
            rationale,
            req.iteration,
            req.now,
            Some(req.test.id.clone()),
        )?;
        t.metadata.origin_agent = AgentRole::Review;
        Ok(t)
    }
}

impl GenerationAgent for TemplateGenerator {
    fn generate_tests(&self, req: &GenerationRequest<'_>) -> Result<GenerationOutput, GenerationError> {
        if req.budget == 0 {
            return Err(GenerationError::Budget);
        }
        let mut out = GenerationOutput::default();
        let mut emitted = BTreeSet::new();
        'units: for unit in self.unit_order(req) {
            let gaps = req.context.coverage_gaps.get(&unit.name);
            // callables spanning more uncovered statements first; stable
            let mut callables: Vec<&CallableEntry> = unit.callables.iter().collect();
            if let Some(gaps) = gaps {
                callables.sort_by_key(|c| std::cmp::Reverse(c.covers.iter().filter(|s| gaps.contains(s)).count()));
            }
            for c in callables {
                for (i, ex) in c.examples.iter().enumerate() {
                    if out.tests.len() >= req.budget {
                        break 'units;
                    }
                    let sref = source_ref(&unit.name, &c.name, i);
                    if req.exclude_refs.contains(&sref) {
                        continue;
                    }
                    let text = render_test(&self.template, unit, c, i, ex)?;
                    let weight = req
                        .context
                        .targets
                        .iter()
                        .find(|(u, _)| u == &unit.name)
                        .map(|(_, w)| *w);
                    let rationale = match (weight, gaps.is_some()) {
                        (Some(w), true) => format!("{sref}: targets uncovered statements, unit weight {w:.3}"),
                        (Some(w), false) => format!("{sref}: prioritized unit, weight {w:.3}"),
                        (None, _) => format!("{sref}: manifest example"),
                    };
                    let test = self.build(unit, c, i, text, rationale, req.iteration, req.now, None)?;
                    if req.exclude_ids.contains(&test.id) || !emitted.insert(test.id.clone()) {
                        out.duplicates.push(test.id);
                        continue;
                    }
                    out.tests.push(test);
                }
            }
        }
        Ok(out)
    }

    fn patch(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError> {
        self.repair(req, "patched")
    }

    fn regenerate(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError> {
        self.repair(req, "regenerated")
    }
}

/// A candidate is well-formed when it is non-empty, contains the dialect's
/// assertion marker and targets a known unit.
pub fn is_well_formed(template: &TestTemplate, manifest: &InterfaceManifest, unit: &str, text: &str) -> bool {
    !text.trim().is_empty() && text.contains(&template.assert_marker) && manifest.unit(unit).is_some()
}

pub(crate) fn quarantine(mut t: TestCase) -> TestCase {
    t.status = TestStatus::Quarantined;
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::GenerationContext;
    use crate::model::TestId;
    use chrono::{TimeZone, Utc};
    use std::collections::HashSet;

    fn manifest() -> InterfaceManifest {
        InterfaceManifest::from_yaml(
            r#"
schema_version: 1
project: calc
units:
  - name: calc/ops.py
    statements: 10
    callables:
      - name: add
        params: [{name: a}, {name: b}]
        covers: [1, 2, 3]
        examples:
          - {inputs: [2, 3], returns: 5}
          - {inputs: [-1, 1], returns: 0}
  - name: calc/text.py
    statements: 4
    callables:
      - name: upper
        params: [{name: s}]
        covers: [1]
        examples:
          - {inputs: ["a{b}"], returns: "A{B}"}
  - name: calc/div.py
    callables:
      - name: divide
        params: [{name: a}, {name: b}]
        examples:
          - {inputs: [1, 0], raises: ZeroDivisionError}
"#,
        )
        .unwrap()
    }

    fn now() -> chrono::DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 1, 2, 3, 4, 5).unwrap()
    }

    fn request<'a>(ctx: &'a GenerationContext, budget: usize, ids: &'a HashSet<TestId>, refs: &'a HashSet<String>) -> GenerationRequest<'a> {
        GenerationRequest {
            project_ref: "calc",
            iteration: 1,
            context: ctx,
            budget,
            seed: 7,
            now: now(),
            exclude_ids: ids,
            exclude_refs: refs,
            targets_only: false,
        }
    }

    #[test]
    fn render_value_example() {
        let m = manifest();
        let u = &m.units[0];
        let text = render_test(&TestTemplate::pytest(), u, &u.callables[0], 0, &u.callables[0].examples[0]).unwrap();
        assert!(text.contains("from calc.ops import add"));
        assert!(text.contains("    a = 2\n    b = 3"));
        assert!(text.contains("result = add(a, b)"));
        assert!(text.contains("assert result == 5"));
        let (a, b, c) = (
            text.find("# arrange").unwrap(),
            text.find("# act").unwrap(),
            text.find("# assert").unwrap(),
        );
        assert!(a < b && b < c);
    }

    #[test]
    fn render_error_example() {
        let m = manifest();
        let u = &m.units[2];
        let text = render_test(&TestTemplate::pytest(), u, &u.callables[0], 0, &u.callables[0].examples[0]).unwrap();
        assert!(text.contains("pytest.raises(ZeroDivisionError)"));
        assert!(text.contains("assert raised.type is ZeroDivisionError"));
    }

    #[test]
    fn render_keeps_braces_in_literals() {
        let m = manifest();
        let u = &m.units[1];
        let text = render_test(&TestTemplate::pytest(), u, &u.callables[0], 0, &u.callables[0].examples[0]).unwrap();
        assert!(text.contains(r#"s = "a{b}""#));
        assert!(text.contains(r#"assert result == "A{B}""#));
    }

    #[test]
    fn render_arity_mismatch() {
        let m = manifest();
        let u = &m.units[0];
        let mut ex = u.callables[0].examples[0].clone();
        ex.inputs.push(1.into());
        assert!(matches!(
            render_test(&TestTemplate::pytest(), u, &u.callables[0], 0, &ex),
            Err(GenerationError::Render(_))
        ));
    }

    #[test]
    fn python_literals() {
        let v = serde_json::json!({"k": [null, true, false, 1.5, "q\"x"]});
        assert_eq!(python_literal(&v), r#"{"k": [None, True, False, 1.5, "q\"x"]}"#);
    }

    #[test]
    fn one_test_per_example_and_budget() {
        let g = TemplateGenerator::new(manifest(), TestTemplate::pytest()).unwrap();
        let ctx = GenerationContext::default();
        let (ids, refs) = (HashSet::new(), HashSet::new());
        let out = g.generate_tests(&request(&ctx, 10, &ids, &refs)).unwrap();
        assert_eq!(out.tests.len(), 4);
        for t in &out.tests {
            t.validate().unwrap();
            assert!(t.has_provenance());
        }
        assert_eq!(out.tests[0].metadata.coverage_estimate, 0.3);
        let out = g.generate_tests(&request(&ctx, 1, &ids, &refs)).unwrap();
        assert_eq!(out.tests.len(), 1);
    }

    #[test]
    fn highest_weight_unit_first() {
        let g = TemplateGenerator::new(manifest(), TestTemplate::pytest()).unwrap();
        let ctx = GenerationContext {
            targets: vec![("calc/div.py".into(), 0.9), ("calc/ops.py".into(), 0.1)],
            ..Default::default()
        };
        let (ids, refs) = (HashSet::new(), HashSet::new());
        let out = g.generate_tests(&request(&ctx, 1, &ids, &refs)).unwrap();
        assert_eq!(out.tests[0].target_unit, "calc/div.py");
    }

    #[test]
    fn deterministic_replay() {
        let g = TemplateGenerator::new(manifest(), TestTemplate::pytest()).unwrap();
        let ctx = GenerationContext::default();
        let (ids, refs) = (HashSet::new(), HashSet::new());
        let a = g.generate_tests(&request(&ctx, 10, &ids, &refs)).unwrap();
        let b = g.generate_tests(&request(&ctx, 10, &ids, &refs)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a.tests).unwrap(),
            serde_json::to_vec(&b.tests).unwrap()
        );
    }

    #[test]
    fn exclusions_skip_known_tests() {
        let g = TemplateGenerator::new(manifest(), TestTemplate::pytest()).unwrap();
        let ctx = GenerationContext::default();
        let (ids, mut refs) = (HashSet::new(), HashSet::new());
        refs.insert(source_ref("calc/ops.py", "add", 0));
        let out = g.generate_tests(&request(&ctx, 10, &ids, &refs)).unwrap();
        assert_eq!(out.tests.len(), 3);
        let ids: HashSet<_> = out.tests.iter().map(|t| t.id.clone()).collect();
        let again = g.generate_tests(&request(&ctx, 10, &ids, &refs)).unwrap();
        assert!(again.tests.is_empty());
        assert_eq!(again.duplicates.len(), 3);
    }

    #[test]
    fn patch_changes_id_and_records_lineage() {
        let g = TemplateGenerator::new(manifest(), TestTemplate::pytest()).unwrap();
        let ctx = GenerationContext::default();
        let (ids, refs) = (HashSet::new(), HashSet::new());
        let t = g.generate_tests(&request(&ctx, 1, &ids, &refs)).unwrap().tests.remove(0);
        let req = RepairRequest {
            test: &t,
            rationale: "assertion repair",
            context_refs: &["m0".to_string()],
            context_snippets: &[],
            failure: None,
            iteration: 2,
            now: now(),
            seed: 1,
        };
        let p = g.patch(&req).unwrap();
        assert_ne!(p.id, t.id);
        assert_eq!(p.metadata.lineage.as_ref(), Some(&t.id));
        assert_eq!(p.metadata.source_ref, t.metadata.source_ref);
        assert!(p.metadata.rationale.contains("m0"));
        assert_eq!(p.metadata.origin_agent, AgentRole::Review);
    }

    #[test]
    fn empty_manifest_rejected() {
        let m = InterfaceManifest {
            schema_version: 1,
            project: "x".into(),
            units: vec![],
        };
        assert!(matches!(
            TemplateGenerator::new(m, TestTemplate::pytest()),
            Err(GenerationError::EmptyManifest)
        ));
    }
}
