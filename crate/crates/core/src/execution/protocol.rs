//! Runner protocol wire format.
//!
//! A runner writes one JSON document to the path given by `--out`:
//!
//! | field                    | type                         | notes                                  |
//! |--------------------------|------------------------------|----------------------------------------|
//! | `schema_version`         | integer, optional (1)        |                                        |
//! | `runner.exit_status`     | integer                      | advisory only                          |
//! | `runner.name`            | string, optional             |                                        |
//! | `runner.error`           | string, optional             | runner-level failure marker            |
//! | `tests[]`                | array                        | ids must be unique                     |
//! | `tests[].id`             | string                       | test id (content hash)                 |
//! | `tests[].verdict`        | `pass` `fail` `error` `timeout` `skipped` |                           |
//! | `tests[].duration_ms`    | number >= 0                  |                                        |
//! | `tests[].message`        | string, optional             | captured diagnostic                    |
//! | `tests[].phase`          | `collect` `setup` `call` `teardown` |                                 |
//! | `coverage.units.<unit>`  | object, optional             | native coverage, see `coverage` module |
//! | `coverage_report`        | `{format, path}`, optional   | external report relative to workdir    |
//!
//! Unknown fields are ignored.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::coverage::NativeCoverage;
use crate::model::{Phase, Verdict};

pub const RESULT_FILE: &str = "ata_result.json";
pub const TESTS_DIR: &str = "generated_tests";

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed result document at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("duplicate test id `{0}` in result document")]
    DuplicateId(String),
    #[error("invalid result document: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerStatus {
    pub exit_status: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub id: String,
    pub verdict: Verdict,
    pub duration_ms: f64,
    #[serde(default)]
    pub message: String,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCoverageReport {
    pub format: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerResultDocument {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub runner: RunnerStatus,
    pub tests: Vec<ResultEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<NativeCoverage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_report: Option<ExternalCoverageReport>,
}

fn default_schema_version() -> u32 {
    1
}

impl RunnerResultDocument {
    pub fn empty(exit_status: i32) -> Self {
        RunnerResultDocument {
            schema_version: 1,
            runner: RunnerStatus {
                exit_status,
                name: None,
                error: None,
            },
            tests: Vec::new(),
            coverage: Some(NativeCoverage::default()),
            coverage_report: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("result document serializes")
    }
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in raw.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(raw.len());
        }
        offset += l.len() + 1;
    }
    raw.len()
}

/// Strict parse: required fields must be present and well-typed, ids must
/// be unique, durations non-negative.
pub fn parse_result_document(raw: &[u8]) -> Result<RunnerResultDocument, ProtocolError> {
    if raw.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(ProtocolError::Parse {
            offset: 0,
            message: "empty document".into(),
        });
    }
    let doc: RunnerResultDocument = serde_json::from_slice(raw).map_err(|e| ProtocolError::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if doc.schema_version < 1 {
        return Err(ProtocolError::Invalid("schema_version must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    for entry in &doc.tests {
        if entry.id.is_empty() {
            return Err(ProtocolError::Invalid("test entry with empty id".into()));
        }
        if !(entry.duration_ms >= 0.0) || !entry.duration_ms.is_finite() {
            return Err(ProtocolError::Invalid(format!(
                "test `{}` has invalid duration {}",
                entry.id, entry.duration_ms
            )));
        }
        if !seen.insert(entry.id.as_str()) {
            return Err(ProtocolError::DuplicateId(entry.id.clone()));
        }
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_parses() {
        let raw = br#"{"runner":{"exit_status":0},"tests":[{"id":"a","verdict":"pass","duration_ms":3,"phase":"call"}]}"#;
        let doc = parse_result_document(raw).unwrap();
        assert_eq!(doc.tests.len(), 1);
        assert_eq!(doc.tests[0].verdict, Verdict::Pass);
        assert_eq!(doc.schema_version, 1);
    }

    #[test]
    fn empty_stream_is_parse_error() {
        assert!(matches!(
            parse_result_document(b""),
            Err(ProtocolError::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn parse_error_reports_byte_offset() {
        let raw = b"{\"runner\": {\"exit_status\": 0},\n \"tests\": [ oops ]}";
        match parse_result_document(raw) {
            Err(ProtocolError::Parse { offset, .. }) => assert_eq!(raw[offset], b'o'),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = br#"{"runner":{"exit_status":1},"tests":[
            {"id":"a","verdict":"pass","duration_ms":1,"phase":"call"},
            {"id":"a","verdict":"fail","duration_ms":1,"phase":"call"}]}"#;
        assert_eq!(parse_result_document(raw), Err(ProtocolError::DuplicateId("a".into())));
    }

    #[test]
    fn unknown_fields_ignored_but_unknown_verdict_rejected() {
        let ok = br#"{"runner":{"exit_status":0,"extra":1},"tests":[],"plugin":"x"}"#;
        assert!(parse_result_document(ok).is_ok());
        let bad = br#"{"runner":{"exit_status":0},"tests":[{"id":"a","verdict":"flaky","duration_ms":1,"phase":"call"}]}"#;
        assert!(matches!(parse_result_document(bad), Err(ProtocolError::Parse { .. })));
        let missing = br#"{"runner":{"exit_status":0},"tests":[{"id":"a","verdict":"pass","phase":"call"}]}"#;
        assert!(matches!(parse_result_document(missing), Err(ProtocolError::Parse { .. })));
    }

    #[test]
    fn negative_duration_rejected() {
        let raw = br#"{"runner":{"exit_status":0},"tests":[{"id":"a","verdict":"pass","duration_ms":-1,"phase":"call"}]}"#;
        assert!(matches!(parse_result_document(raw), Err(ProtocolError::Invalid(_))));
    }

    #[test]
    fn serialized_document_reparses() {
        let mut doc = RunnerResultDocument::empty(0);
        doc.tests.push(ResultEntry {
            id: "x".into(),
            verdict: Verdict::Timeout,
            duration_ms: 30_000.0,
            message: "timed out".into(),
            phase: Phase::Call,
        });
        assert_eq!(parse_result_document(&doc.to_bytes()).unwrap(), doc);
    }
}
