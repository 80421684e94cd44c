//! Remote model backend over an HTTP chat-completion endpoint.
//!
//! Request (POST to `endpoint`, `Authorization: Bearer $ATA_LLM_API_KEY`):
//!
//! | field            | value                                             |
//! |------------------|---------------------------------------------------|
//! | `model`          | `remote.model`                                    |
//! | `temperature`    | `0`                                               |
//! | `seed`           | run seed                                          |
//! | `messages[0]`    | `{role: system, content: <instructions>}`         |
//! | `messages[1]`    | `{role: user, content: <prompt bundle>}`          |
//!
//! Response: the string at the JSON pointer `remote.response_pointer`
//! (default `/choices/0/message/content`). That string is read as, in
//! order of preference: a JSON array of strings or of
//! `{target_unit, source}` objects; a JSON object with a `tests` array of
//! the same; fenced code blocks; or the whole text as one candidate.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::manifest::InterfaceManifest;
use super::template::{is_well_formed, quarantine, TestTemplate};
use super::{annotate_metadata, GenerationAgent, GenerationError, GenerationOutput, GenerationRequest, RepairRequest};
use crate::model::{AgentRole, TestCase, TestMetadata};

pub const API_KEY_ENV: &str = "ATA_LLM_API_KEY";

const SYSTEM_PROMPT: &str = "You write executable unit tests. Every test follows arrange, act, assert \
sections, imports only the unit under test, and asserts concrete values. Reply with a JSON array of \
objects {\"target_unit\": <unit name>, \"source\": <complete test file>}.";

fn default_model() -> String {
    "gpt-4o-mini".into()
}
fn default_retries() -> u32 {
    2
}
fn default_timeout() -> f64 {
    60.0
}
fn default_pointer() -> String {
    "/choices/0/message/content".into()
}
fn default_excerpt() -> usize {
    4000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    /// Extra attempts after the first transport failure.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_pointer")]
    pub response_pointer: String,
    /// Characters of each source unit included in the prompt.
    #[serde(default = "default_excerpt")]
    pub excerpt_chars: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: default_model(),
            max_retries: default_retries(),
            timeout_s: default_timeout(),
            response_pointer: default_pointer(),
            excerpt_chars: default_excerpt(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PromptBundle {
    pub source_excerpts: Vec<(String, String)>,
    pub coverage_gaps: Vec<(String, Vec<u32>)>,
    pub retrieved_examples: Vec<String>,
    pub instructions: String,
}

impl PromptBundle {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.instructions);
        s.push('\n');
        for (unit, src) in &self.source_excerpts {
            s.push_str(&format!("\n## Source: {unit}\n```\n{src}\n```\n"));
        }
        if !self.coverage_gaps.is_empty() {
            s.push_str("\n## Uncovered statements\n");
            for (unit, lines) in &self.coverage_gaps {
                let ls: Vec<String> = lines.iter().map(u32::to_string).collect();
                s.push_str(&format!("- {unit}: lines {}\n", ls.join(", ")));
            }
        }
        if !self.retrieved_examples.is_empty() {
            s.push_str("\n## Related prior feedback\n");
            for ex in &self.retrieved_examples {
                s.push_str(&format!("- {ex}\n"));
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub target_unit: Option<String>,
    pub source: String,
}

pub struct RemoteGenerator {
    config: RemoteConfig,
    api_key: String,
    manifest: InterfaceManifest,
    template: TestTemplate,
    project_dir: Option<std::path::PathBuf>,
    client: reqwest::blocking::Client,
    cancel: Arc<AtomicBool>,
}

impl std::fmt::Debug for RemoteGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteGenerator").field("endpoint", &self.config.endpoint).finish()
    }
}

impl RemoteGenerator {
    /// Reads the credential from `ATA_LLM_API_KEY`; fails before any call
    /// when it is absent.
    pub fn from_env(
        config: RemoteConfig,
        manifest: InterfaceManifest,
        template: TestTemplate,
        project_dir: Option<std::path::PathBuf>,
    ) -> Result<Self, GenerationError> {
        let key = std::env::var(API_KEY_ENV).unwrap_or_default();
        Self::with_key(config, key, manifest, template, project_dir)
    }

    pub fn with_key(
        config: RemoteConfig,
        api_key: String,
        manifest: InterfaceManifest,
        template: TestTemplate,
        project_dir: Option<std::path::PathBuf>,
    ) -> Result<Self, GenerationError> {
        if config.endpoint.trim().is_empty() {
            return Err(GenerationError::Config("remote endpoint URL is empty".into()));
        }
        if api_key.trim().is_empty() {
            return Err(GenerationError::Config(format!("{API_KEY_ENV} is not set")));
        }
        if !(config.timeout_s > 0.0) {
            return Err(GenerationError::Config("timeout_s must be > 0".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| GenerationError::Config(e.to_string()))?;
        Ok(RemoteGenerator {
            config,
            api_key,
            manifest,
            template,
            project_dir,
            client,
            cancel: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Flag checked before every attempt; set it to abandon pending calls.
    pub fn cancel_handle(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    fn call(&self, prompt: &str, seed: u64) -> Result<String, GenerationError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "seed": seed,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
        });
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            if self.cancel.load(Ordering::SeqCst) {
                return Err(GenerationError::Cancelled);
            }
            let resp = self
                .client
                .post(&self.config.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            match resp {
                Ok(r) if r.status().is_success() => {
                    let v: Value = r.json().map_err(|e| GenerationError::Backend {
                        attempts: attempt,
                        message: format!("response is not JSON: {e}"),
                    })?;
                    return match v.pointer(&self.config.response_pointer) {
                        Some(Value::String(s)) => Ok(s.clone()),
                        Some(Value::Null) | None => Ok(String::new()),
                        Some(other) => Ok(other.to_string()),
                    };
                }
                Ok(r) => last = format!("HTTP {}", r.status()),
                Err(e) => last = e.to_string(),
            }
            tracing::debug!(attempt, error = %last, "remote generation attempt failed");
        }
        Err(GenerationError::Backend {
            attempts,
            message: last,
        })
    }

    /// Sends one prompt bundle and returns the raw candidates.
    pub fn remote_generate(&self, bundle: &PromptBundle, seed: u64) -> Result<Vec<Candidate>, GenerationError> {
        let content = self.call(&bundle.render(), seed)?;
        Ok(parse_candidates(&content))
    }

    fn excerpts(&self, units: &[String]) -> Vec<(String, String)> {
        let Some(root) = &self.project_dir else { return Vec::new() };
        units
            .iter()
            .filter_map(|u| {
                let text = std::fs::read_to_string(root.join(u)).ok()?;
                Some((u.clone(), text.chars().take(self.config.excerpt_chars).collect()))
            })
            .collect()
    }

    fn guess_unit(&self, c: &Candidate) -> Option<String> {
        if let Some(u) = &c.target_unit {
            return Some(u.clone());
        }
        self.manifest
            .units
            .iter()
            .find(|u| c.source.contains(&u.import_path()))
            .map(|u| u.name.clone())
    }

    fn to_test(&self, c: &Candidate, rationale: &str, iteration: u32, now: chrono::DateTime<chrono::Utc>, origin: AgentRole) -> Result<(TestCase, bool), GenerationError> {
        let unit = self.guess_unit(c).unwrap_or_else(|| "<unknown>".into());
        let well_formed = is_well_formed(&self.template, &self.manifest, &unit, &c.source);
        let target_module = self
            .manifest
            .unit(&unit)
            .map(|u| u.import_path())
            .unwrap_or_else(|| unit.clone());
        let meta = TestMetadata {
            target_module,
            mock_dependencies: Vec::new(),
            coverage_estimate: 0.0,
            origin_agent: origin,
            rationale: String::new(),
            timestamp: now,
            iteration_created: iteration,
            lineage: None,
            source_ref: None,
        };
        let test = annotate_metadata(TestCase::new(unit, c.source.clone(), meta), origin, rationale, 0.0, now)?;
        Ok((test, well_formed))
    }
}

fn candidate_from(v: &Value) -> Option<Candidate> {
    match v {
        Value::String(s) => Some(Candidate {
            target_unit: None,
            source: s.clone(),
        }),
        Value::Object(o) => {
            let source = ["source", "code", "text"]
                .iter()
                .find_map(|k| o.get(*k).and_then(Value::as_str))
                .unwrap_or_default()
                .to_string();
            let target_unit = o.get("target_unit").and_then(Value::as_str).map(String::from);
            Some(Candidate { target_unit, source })
        }
        _ => None,
    }
}

/// Extracts candidate test texts from model output.
pub fn parse_candidates(content: &str) -> Vec<Candidate> {
    let trimmed = content.trim();
    if trimmed.is_empty() {
        return Vec::new();
    }
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        let items = match &v {
            Value::Array(a) => Some(a.clone()),
            Value::Object(o) => o.get("tests").and_then(Value::as_array).cloned(),
            _ => None,
        };
        if let Some(items) = items {
            return items.iter().filter_map(candidate_from).collect();
        }
    }
    let mut blocks = Vec::new();
    let mut rest = trimmed;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let Some(end) = after[body_start..].find("```") else { break };
        blocks.push(Candidate {
            target_unit: None,
            source: after[body_start..body_start + end].to_string(),
        });
        rest = &after[body_start + end + 3..];
    }
    if blocks.is_empty() {
        blocks.push(Candidate {
            target_unit: None,
            source: trimmed.to_string(),
        });
    }
    blocks
}

impl GenerationAgent for RemoteGenerator {
    fn generate_tests(&self, req: &GenerationRequest<'_>) -> Result<GenerationOutput, GenerationError> {
        if req.budget == 0 {
            return Err(GenerationError::Budget);
        }
        let mut units: Vec<String> = req.context.targets.iter().map(|(u, _)| u.clone()).collect();
        if units.is_empty() {
            units = self.manifest.units.iter().map(|u| u.name.clone()).collect();
        }
        let bundle = PromptBundle {
            source_excerpts: self.excerpts(&units),
            coverage_gaps: req
                .context
                .coverage_gaps
                .iter()
                .map(|(u, g)| (u.clone(), g.iter().copied().collect()))
                .collect(),
            retrieved_examples: req.context.retrieved_snippets.clone(),
            instructions: format!(
                "Write at most {} new tests for project `{}`, prioritizing units in this order: {}.",
                req.budget,
                req.project_ref,
                units.join(", ")
            ),
        };
        let candidates = self.remote_generate(&bundle, req.seed)?;
        if candidates.is_empty() {
            tracing::info!("remote backend returned no candidates");
        }
        let mut out = GenerationOutput::default();
        let mut seen = std::collections::HashSet::new();
        for c in &candidates {
            let (test, ok) = self.to_test(c, "remote model candidate", req.iteration, req.now, AgentRole::Generation)?;
            if !ok {
                out.quarantined.push(quarantine(test));
                continue;
            }
            if req.exclude_ids.contains(&test.id) || !seen.insert(test.id.clone()) {
                out.duplicates.push(test.id);
                continue;
            }
            if out.tests.len() < req.budget {
                out.tests.push(test);
            }
        }
        Ok(out)
    }

    fn patch(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError> {
        self.repair(req, "Repair the failing test below so that it passes against the unit as written.")
    }

    fn regenerate(&self, req: &RepairRequest<'_>) -> Result<TestCase, GenerationError> {
        self.repair(req, "The test below could not be collected. Write a replacement test for the same unit.")
    }
}

impl RemoteGenerator {
    fn repair(&self, req: &RepairRequest<'_>, instructions: &str) -> Result<TestCase, GenerationError> {
        let mut text = format!("{instructions}\n\n## Test ({})\n```\n{}\n```\n", req.test.target_unit, req.test.source_text);
        if let Some(f) = req.failure {
            text.push_str(&format!(
                "\n## Failure ({:?})\n{}\nHypothesis: {}\n",
                f.failure_class, f.signal.message, f.hypothesis
            ));
        }
        let bundle = PromptBundle {
            source_excerpts: self.excerpts(std::slice::from_ref(&req.test.target_unit)),
            coverage_gaps: Vec::new(),
            retrieved_examples: req.context_snippets.to_vec(),
            instructions: text,
        };
        let candidates = self.remote_generate(&bundle, req.seed)?;
        for mut c in candidates {
            c.target_unit.get_or_insert_with(|| req.test.target_unit.clone());
            let (mut t, ok) = self.to_test(&c, req.rationale, req.iteration, req.now, AgentRole::Review)?;
            if ok && t.id != req.test.id {
                t.metadata.lineage = Some(req.test.id.clone());
                t.metadata.source_ref = req.test.metadata.source_ref.clone();
                return Ok(t);
            }
        }
        Err(GenerationError::Backend {
            attempts: 1,
            message: "no usable repair candidate".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_from_json_array_and_object() {
        let c = parse_candidates(r#"["assert 1", "assert 2"]"#);
        assert_eq!(c.len(), 2);
        let c = parse_candidates(r#"{"tests":[{"target_unit":"u.py","source":"assert x"}]}"#);
        assert_eq!(c[0].target_unit.as_deref(), Some("u.py"));
        assert_eq!(c[0].source, "assert x");
    }

    #[test]
    fn candidates_from_fences_or_plain_text() {
        let c = parse_candidates("Here:\n```python\nassert a\n```\nand\n```\nassert b\n```");
        assert_eq!(
            c.iter().map(|c| c.source.as_str()).collect::<Vec<_>>(),
            vec!["assert a\n", "assert b\n"]
        );
        assert_eq!(parse_candidates("assert c").len(), 1);
        assert!(parse_candidates("   ").is_empty());
        assert!(parse_candidates("[]").is_empty());
    }

    #[test]
    fn missing_credential_is_config_error() {
        let m = InterfaceManifest {
            schema_version: 1,
            project: "p".into(),
            units: vec![],
        };
        let r = RemoteGenerator::with_key(RemoteConfig::new("http://127.0.0.1:1"), String::new(), m, TestTemplate::pytest(), None);
        assert!(matches!(r, Err(GenerationError::Config(_))));
    }
}
