#![allow(dead_code)]

use ata_core::model::{AgentRole, TestCase, TestMetadata, TestSuite};
use chrono::{DateTime, TimeZone, Utc};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()
}

pub fn case(unit: &str, source: &str) -> TestCase {
    TestCase::new(
        unit,
        source,
        TestMetadata {
            target_module: unit.replace(".py", "").replace('/', "."),
            mock_dependencies: vec![],
            coverage_estimate: 0.1,
            origin_agent: AgentRole::Generation,
            rationale: "fixture".into(),
            timestamp: t0(),
            iteration_created: 1,
            lineage: None,
            source_ref: None,
        },
    )
}

pub fn suite(tests: Vec<TestCase>) -> TestSuite {
    let mut s = TestSuite::new("calc", 1);
    for t in tests {
        s.push_unique(t);
    }
    s
}

pub const CALC_MANIFEST: &str = r#"
schema_version: 1
project: calc
units:
  - name: calc/ops.py
    statements: 10
    callables:
      - name: add
        params: [{name: a, kind: int}, {name: b, kind: int}]
        covers: [1, 2, 3]
        examples:
          - {inputs: [2, 3], returns: 5}
          - {inputs: [1, "x"], raises: TypeError}
      - name: neg
        params: [{name: a, kind: int}]
        covers: [4, 5]
        examples:
          - {inputs: [2], returns: -2}
"#;
