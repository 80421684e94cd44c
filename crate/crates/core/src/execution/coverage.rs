//! Coverage ingestion.
//!
//! Native section (inside the result document), per unit:
//!
//! | field                    | type                | required |
//! |--------------------------|---------------------|----------|
//! | `total_statements`       | integer             | yes      |
//! | `covered_statement_ids`  | array of line ids   | yes      |
//! | `missing_statement_ids`  | array of line ids   | no       |
//! | `total_branches`         | integer             | no       |
//! | `covered_branches`       | integer             | no       |
//!
//! Cobertura-style XML: every `<class filename=..>` contributes its
//! `<line number=.. hits=..>` elements to the unit named by `filename`.
//! Statement totals are the distinct line numbers; a line is covered when
//! `hits > 0`. Branch totals come from `condition-coverage="NN% (c/t)"` on
//! lines with `branch="true"` and are only populated when such lines exist.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CoverageMap, ModelError, UnitCoverage};

#[derive(Debug, Error, PartialEq)]
pub enum CoverageError {
    #[error("unknown coverage format `{0}` (expected `native` or `cobertura-xml`)")]
    UnknownFormat(String),
    #[error("malformed coverage report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Integrity(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageFormat {
    #[serde(rename = "native")]
    Native,
    #[serde(rename = "cobertura-xml")]
    CoberturaXml,
}

impl FromStr for CoverageFormat {
    type Err = CoverageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(CoverageFormat::Native),
            "cobertura-xml" => Ok(CoverageFormat::CoberturaXml),
            other => Err(CoverageError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NativeUnit {
    pub total_statements: u64,
    pub covered_statement_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_statement_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_branches: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered_branches: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NativeCoverage {
    #[serde(default)]
    pub units: BTreeMap<String, NativeUnit>,
}

impl NativeCoverage {
    pub fn from_map(map: &CoverageMap) -> Self {
        NativeCoverage {
            units: map
                .units
                .iter()
                .map(|(name, u)| {
                    (
                        name.clone(),
                        NativeUnit {
                            total_statements: u.total_statements,
                            covered_statement_ids: u.covered_statements.iter().copied().collect(),
                            missing_statement_ids: u.missing_statements.as_ref().map(|m| m.iter().copied().collect()),
                            total_branches: u.total_branches,
                            covered_branches: u.covered_branches,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_map(&self) -> Result<CoverageMap, CoverageError> {
        let mut map = CoverageMap::new();
        for (name, u) in &self.units {
            let covered: BTreeSet<u32> = u.covered_statement_ids.iter().copied().collect();
            if u.covered_branches.is_some() && u.total_branches.is_none() {
                return Err(CoverageError::Malformed(format!(
                    "unit `{name}` reports covered_branches without total_branches"
                )));
            }
            map.insert(
                name.clone(),
                UnitCoverage {
                    total_statements: u.total_statements,
                    covered_statements: covered,
                    missing_statements: u.missing_statement_ids.as_ref().map(|m| m.iter().copied().collect()),
                    total_branches: u.total_branches,
                    covered_branches: u.total_branches.map(|_| u.covered_branches.unwrap_or(0)),
                },
            );
        }
        map.validate()?;
        Ok(map)
    }
}

pub fn parse_coverage(raw: &[u8], format: CoverageFormat) -> Result<CoverageMap, CoverageError> {
    match format {
        CoverageFormat::Native => {
            if raw.iter().all(|b| b.is_ascii_whitespace()) {
                return Ok(CoverageMap::new());
            }
            let native: NativeCoverage =
                serde_json::from_slice(raw).map_err(|e| CoverageError::Malformed(e.to_string()))?;
            native.to_map()
        }
        CoverageFormat::CoberturaXml => parse_cobertura(raw),
    }
}

#[derive(Default)]
struct LineAcc {
    hits: BTreeMap<u32, u64>,
    branches: BTreeMap<u32, (u64, u64)>,
}

fn attr(e: &BytesStart<'_>, name: &[u8]) -> Result<Option<String>, CoverageError> {
    for a in e.attributes() {
        let a = a.map_err(|err| CoverageError::Malformed(err.to_string()))?;
        if a.key.as_ref() == name {
            let v = a
                .unescape_value()
                .map_err(|err| CoverageError::Malformed(err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

/// `"50% (1/2)"` -> `(1, 2)`
fn condition_counts(text: &str) -> Option<(u64, u64)> {
    let inner = text.split_once('(')?.1.split_once(')')?.0;
    let (c, t) = inner.split_once('/')?;
    Some((c.trim().parse().ok()?, t.trim().parse().ok()?))
}

fn parse_cobertura(raw: &[u8]) -> Result<CoverageMap, CoverageError> {
    let mut reader = Reader::from_reader(raw);
    reader.config_mut().trim_text(true);
    let mut buf = Vec::new();
    let mut units: BTreeMap<String, LineAcc> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut saw_root = false;
    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| CoverageError::Malformed(format!("at byte {}: {e}", reader.buffer_position())))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => match e.name().as_ref() {
                b"coverage" => saw_root = true,
                b"class" => {
                    let file = attr(e, b"filename")?
                        .ok_or_else(|| CoverageError::Malformed("<class> without filename".into()))?;
                    units.entry(file.clone()).or_default();
                    current = if matches!(event, Event::Start(_)) { Some(file) } else { None };
                }
                b"line" if current.is_some() => {
                    let unit = current.as_ref().expect("guarded");
                    let number: u32 = attr(e, b"number")?
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| CoverageError::Malformed("<line> without numeric number".into()))?;
                    let hits: u64 = attr(e, b"hits")?.and_then(|h| h.parse().ok()).unwrap_or(0);
                    let acc = units.get_mut(unit).expect("class registered");
                    let slot = acc.hits.entry(number).or_insert(0);
                    *slot = (*slot).max(hits);
                    if attr(e, b"branch")?.as_deref() == Some("true") {
                        if let Some(cc) = attr(e, b"condition-coverage")? {
                            let (c, t) = condition_counts(&cc)
                                .ok_or_else(|| CoverageError::Malformed(format!("bad condition-coverage `{cc}`")))?;
                            if c > t {
                                return Err(ModelError::BranchOverflow {
                                    unit: unit.clone(),
                                    covered: c,
                                    total: t,
                                }
                                .into());
                            }
                            let b = acc.branches.entry(number).or_insert((0, 0));
                            *b = (b.0.max(c), b.1.max(t));
                        }
                    }
                }
                _ => {}
            },
            Event::End(ref e) if e.name().as_ref() == b"class" => current = None,
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if !saw_root {
        return Err(CoverageError::Malformed("missing <coverage> root element".into()));
    }
    let mut map = CoverageMap::new();
    for (name, acc) in units {
        let covered: BTreeSet<u32> = acc.hits.iter().filter(|(_, h)| **h > 0).map(|(l, _)| *l).collect();
        let missing: BTreeSet<u32> = acc.hits.iter().filter(|(_, h)| **h == 0).map(|(l, _)| *l).collect();
        let (total_branches, covered_branches) = if acc.branches.is_empty() {
            (None, None)
        } else {
            let (c, t) = acc.branches.values().fold((0, 0), |(c, t), (bc, bt)| (c + bc, t + bt));
            (Some(t), Some(c))
        };
        map.insert(
            name,
            UnitCoverage {
                total_statements: acc.hits.len() as u64,
                covered_statements: covered,
                missing_statements: Some(missing),
                total_branches,
                covered_branches,
            },
        );
    }
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_ratio() {
        let raw = serde_json::to_vec(&serde_json::json!({
            "units": {"u": {"total_statements": 100, "covered_statement_ids": (1..=80).collect::<Vec<u32>>()}}
        }))
        .unwrap();
        let map = parse_coverage(&raw, CoverageFormat::Native).unwrap();
        assert_eq!(map.unit("u").unwrap().fraction(), 0.80);
        assert_eq!(map.branch_fraction(), None);
    }

    #[test]
    fn empty_native_section() {
        let map = parse_coverage(b"{}", CoverageFormat::Native).unwrap();
        assert!(map.is_empty());
        assert_eq!(map.statement_fraction(), 0.0);
        assert!(parse_coverage(b"", CoverageFormat::Native).unwrap().is_empty());
    }

    #[test]
    fn native_overflow_is_integrity_error() {
        let raw = br#"{"units":{"u":{"total_statements":1,"covered_statement_ids":[1,2]}}}"#;
        assert!(matches!(
            parse_coverage(raw, CoverageFormat::Native),
            Err(CoverageError::Integrity(ModelError::CoverageOverflow { .. }))
        ));
        let raw = br#"{"units":{"u":{"total_statements":3,"covered_statement_ids":[1],"total_branches":2,"covered_branches":3}}}"#;
        assert!(matches!(
            parse_coverage(raw, CoverageFormat::Native),
            Err(CoverageError::Integrity(ModelError::BranchOverflow { .. }))
        ));
    }

    #[test]
    fn unknown_format_tag() {
        assert_eq!(
            "lcov".parse::<CoverageFormat>(),
            Err(CoverageError::UnknownFormat("lcov".into()))
        );
    }

    // Hand count: five <line> elements, hits > 0 on lines 1, 2 and 4.
    const SNIPPET: &str = r#"<?xml version="1.0" ?>
<coverage line-rate="0.6" branch-rate="0.5" version="7.4">
  <packages><package name="calc"><classes>
    <class name="ops.py" filename="calc/ops.py" line-rate="0.6"><lines>
        <line number="1" hits="1"/>
        <line number="2" hits="3" branch="true" condition-coverage="50% (1/2)"/>
        <line number="3" hits="0"/>
        <line number="4" hits="1"/>
        <line number="5" hits="0"/>
    </lines></class>
  </classes></package></packages>
</coverage>"#;

    #[test]
    fn cobertura_snippet_totals() {
        assert_eq!(SNIPPET.lines().count(), 12);
        let map = parse_coverage(SNIPPET.as_bytes(), CoverageFormat::CoberturaXml).unwrap();
        let u = map.unit("calc/ops.py").unwrap();
        assert_eq!((u.total_statements, u.covered_statements.len()), (5, 3));
        assert_eq!(u.uncovered(), [3, 5].into());
        assert_eq!((u.total_branches, u.covered_branches), (Some(2), Some(1)));
    }

    #[test]
    fn cobertura_merges_duplicate_lines_across_methods() {
        let xml = r#"<coverage><packages><package><classes>
            <class filename="a.py"><methods><method><lines><line number="2" hits="0"/></lines></method></methods>
              <lines><line number="1" hits="1"/><line number="2" hits="4"/></lines></class>
            <class filename="b.py"><lines/></class>
            </classes></package></packages></coverage>"#;
        let map = parse_coverage(xml.as_bytes(), CoverageFormat::CoberturaXml).unwrap();
        let a = map.unit("a.py").unwrap();
        assert_eq!((a.total_statements, a.covered_statements.len()), (2, 2));
        assert_eq!(map.unit("b.py").unwrap().total_statements, 0);
        assert_eq!(a.total_branches, None);
    }

    #[test]
    fn cobertura_branch_overflow_and_garbage() {
        let xml = r#"<coverage><class filename="a.py"><lines>
            <line number="1" hits="1" branch="true" condition-coverage="150% (3/2)"/></lines></class></coverage>"#;
        assert!(matches!(
            parse_coverage(xml.as_bytes(), CoverageFormat::CoberturaXml),
            Err(CoverageError::Integrity(_))
        ));
        assert!(parse_coverage(b"<notcoverage/>", CoverageFormat::CoberturaXml).is_err());
        assert!(parse_coverage(b"<coverage><class filename='x'>", CoverageFormat::CoberturaXml).is_ok());
    }

    #[test]
    fn native_round_trip_through_map() {
        let raw = br#"{"units":{"u":{"total_statements":4,"covered_statement_ids":[1,3],"missing_statement_ids":[2,4],"total_branches":2,"covered_branches":1}}}"#;
        let map = parse_coverage(raw, CoverageFormat::Native).unwrap();
        assert_eq!(NativeCoverage::from_map(&map).to_map().unwrap(), map);
    }
}
