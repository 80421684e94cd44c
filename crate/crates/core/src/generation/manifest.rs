//! Interface manifest: the machine-checkable description of what a target
//! project exposes and how it should behave.
//!
//! ```yaml
//! schema_version: 1
//! project: calc
//! units:
//!   - name: calc/ops.py        # source unit, relative to the project root
//!     module: calc.ops         # optional import path
//!     statements: 20           # optional, used for coverage estimates
//!     callables:
//!       - name: add
//!         params:
//!           - {name: a, kind: int}
//!           - {name: b, kind: int}
//!         covers: [3, 4]       # statement ids the callable body spans
//!         mock_dependencies: []
//!         examples:
//!           - {inputs: [2, 3], returns: 5}
//!           - {inputs: [1, "x"], raises: TypeError}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::GenerationError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    Returns(Value),
    Raises(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub inputs: Vec<Value>,
    #[serde(flatten)]
    pub expect: Expectation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    #[serde(default = "any_kind")]
    pub kind: String,
    /// Illustrative values, not used for rendering.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<Value>,
}

fn any_kind() -> String {
    "any".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallableEntry {
    pub name: String,
    #[serde(default)]
    pub params: Vec<Param>,
    #[serde(default)]
    pub covers: Vec<u32>,
    #[serde(default)]
    pub mock_dependencies: Vec<String>,
    pub examples: Vec<ExamplePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statements: Option<u32>,
    pub callables: Vec<CallableEntry>,
}

impl UnitEntry {
    /// `calc/ops.py` -> `calc.ops` unless an explicit module is given.
    pub fn import_path(&self) -> String {
        if let Some(m) = &self.module {
            return m.clone();
        }
        let stem = self.name.rsplit_once('.').map_or(self.name.as_str(), |(s, _)| s);
        stem.replace(['/', '\\'], ".")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub project: String,
    pub units: Vec<UnitEntry>,
}

/// `unit::callable#index`, stable across renders.
pub fn source_ref(unit: &str, callable: &str, index: usize) -> String {
    format!("{unit}::{callable}#{index}")
}

pub fn parse_source_ref(r: &str) -> Option<(&str, &str, usize)> {
    let (unit, rest) = r.rsplit_once("::")?;
    let (callable, idx) = rest.rsplit_once('#')?;
    Some((unit, callable, idx.parse().ok()?))
}

impl InterfaceManifest {
    pub fn from_yaml(text: &str) -> Result<Self, GenerationError> {
        serde_yaml::from_str(text).map_err(|e| GenerationError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenerationError::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn callable_count(&self) -> usize {
        self.units.iter().map(|u| u.callables.len()).sum()
    }

    pub fn unit(&self, name: &str) -> Option<&UnitEntry> {
        self.units.iter().find(|u| u.name == name)
    }

    pub fn lookup(&self, source_ref: &str) -> Option<(&UnitEntry, &CallableEntry, usize, &ExamplePair)> {
        let (unit, callable, idx) = parse_source_ref(source_ref)?;
        let u = self.unit(unit)?;
        let c = u.callables.iter().find(|c| c.name == callable)?;
        Some((u, c, idx, c.examples.get(idx)?))
    }

    /// Every violation, not only the first. With `project_root` the unit
    /// names must resolve to files under it.
    pub fn validate(&self, project_root: Option<&Path>) -> Result<(), Vec<String>> {
        let mut v = Vec::new();
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            v.push(format!(
                "unsupported manifest schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        for u in &self.units {
            if let Some(root) = project_root {
                if !root.join(&u.name).exists() {
                    v.push(format!("unit `{}` does not resolve under {}", u.name, root.display()));
                }
            }
            for c in &u.callables {
                if c.examples.is_empty() {
                    v.push(format!("{}::{} has no example pairs", u.name, c.name));
                }
                for (i, ex) in c.examples.iter().enumerate() {
                    if ex.inputs.len() != c.params.len() {
                        v.push(format!(
                            "{}::{} example {i} has {} inputs for {} params",
                            u.name,
                            c.name,
                            ex.inputs.len(),
                            c.params.len()
                        ));
                    }
                }
                if let Some(total) = u.statements {
                    if let Some(bad) = c.covers.iter().find(|s| **s == 0 || **s > total) {
                        v.push(format!("{}::{} covers statement {bad} outside 1..={total}", u.name, c.name));
                    }
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Fraction of the unit's statements the callable spans; 0 when the
    /// unit size is not declared.
    pub fn coverage_estimate(&self, unit: &UnitEntry, callable: &CallableEntry) -> f64 {
        match unit.statements {
            Some(total) if total > 0 => (callable.covers.len() as f64 / f64::from(total)).min(1.0),
            _ => 0.0,
        }
    }
}
