//! Append-only run trace, one JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::AgentRole;

use super::OrchestratorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub ts: DateTime<Utc>,
    pub run_id: String,
    pub iteration: u32,
    pub agent: AgentRole,
    pub kind: String,
    pub correlation_id: String,
    pub rationale: String,
    #[serde(default)]
    pub payload_summary: serde_json::Value,
}

/// The fields callers supply; the sink adds the run id and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub iteration: u32,
    pub agent: AgentRole,
    pub kind: String,
    pub correlation_id: String,
    pub rationale: String,
    pub payload_summary: serde_json::Value,
}

pub const ITERATION_END: &str = "iteration-end";

enum Sink {
    Memory(Vec<TraceRecord>),
    File { path: PathBuf, file: File, records: Vec<TraceRecord> },
}

/// Serialized per run: records are appended in emission order.
pub struct TraceLog {
    sink: Mutex<Sink>,
}

impl std::fmt::Debug for TraceLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TraceLog").field("records", &self.records().len()).finish()
    }
}

impl TraceLog {
    pub fn in_memory() -> Self {
        TraceLog {
            sink: Mutex::new(Sink::Memory(Vec::new())),
        }
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| OrchestratorError::Trace(format!("{}: {e}", parent.display())))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| OrchestratorError::Trace(format!("{}: {e}", path.display())))?;
        Ok(TraceLog {
            sink: Mutex::new(Sink::File {
                path,
                file,
                records: Vec::new(),
            }),
        })
    }

    pub fn emit(&self, run_id: &str, ts: DateTime<Utc>, event: TraceEvent) -> Result<TraceRecord, OrchestratorError> {
        let record = TraceRecord {
            ts,
            run_id: run_id.to_string(),
            iteration: event.iteration,
            agent: event.agent,
            kind: event.kind,
            correlation_id: event.correlation_id,
            rationale: event.rationale,
            payload_summary: event.payload_summary,
        };
        let mut sink = self.sink.lock().expect("trace lock poisoned");
        match &mut *sink {
            Sink::Memory(v) => v.push(record.clone()),
            Sink::File { path, file, records } => {
                let mut line = serde_json::to_string(&record).map_err(|e| OrchestratorError::Trace(e.to_string()))?;
                line.push('\n');
                file.write_all(line.as_bytes())
                    .and_then(|_| file.flush())
                    .map_err(|e| OrchestratorError::Trace(format!("{}: {e}", path.display())))?;
                records.push(record.clone());
            }
        }
        Ok(record)
    }

    /// Records emitted through this handle.
    pub fn records(&self) -> Vec<TraceRecord> {
        match &*self.sink.lock().expect("trace lock poisoned") {
            Sink::Memory(v) => v.clone(),
            Sink::File { records, .. } => records.clone(),
        }
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, OrchestratorError> {
    let f = File::open(path).map_err(|e| OrchestratorError::Trace(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| OrchestratorError::Trace(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| OrchestratorError::Trace(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Iterations recorded for a run, counted from its iteration-end events.
pub fn iterations_in(records: &[TraceRecord], run_id: &str) -> usize {
    records
        .iter()
        .filter(|r| r.run_id == run_id && r.kind == ITERATION_END)
        .count()
}

/// Trace with timestamps removed, for run-to-run comparison.
pub fn without_timestamps(records: &[TraceRecord]) -> Vec<serde_json::Value> {
    records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("trace record serializes");
            v.as_object_mut().expect("object").remove("ts");
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ev(kind: &str) -> TraceEvent {
        TraceEvent {
            iteration: 1,
            agent: AgentRole::Review,
            kind: kind.into(),
            correlation_id: "r-it1".into(),
            rationale: "because".into(),
            payload_summary: serde_json::json!({}),
        }
    }

    #[test]
    fn file_trace_keeps_emission_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t/trace.jsonl");
        let log = TraceLog::open(&path).unwrap();
        let ts = Utc.timestamp_opt(5, 0).unwrap();
        log.emit("r", ts, ev("a")).unwrap();
        log.emit("r", ts, ev("b")).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.kind.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(back, log.records());
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.lines().next().unwrap().contains("\"agent\":\"review\""));
    }

    #[test]
    fn unwritable_trace_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        assert!(matches!(TraceLog::open(blocker.join("trace.jsonl")), Err(OrchestratorError::Trace(_))));
    }
}
