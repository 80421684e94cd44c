//! Shared persistence: artifact registry, semantic memory, metrics history.

mod artifacts;
mod vector;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, RwLock};

use thiserror::Error;

pub use artifacts::{ArtifactAddress, ArtifactStore, IndexEntry, MediaType};
pub use vector::{
    cosine, norm, Embedder, HashingEmbedder, MemoryKind, MemoryRecord, PruneWindow, SimilarRecord, VectorMemory,
    DEFAULT_DIMENSION,
};

use crate::metrics::IterationMetrics;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("artifact not found: {0}")]
    NotFound(String),
    #[error("store is corrupt: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot embed text with no content")]
    EmptyText,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector dimension {actual} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("prune window and record cap must both be at least 1")]
    InvalidWindow,
    #[error("run {run_id}: iteration {got} recorded after {last:?}; expected {expected}")]
    OutOfOrder {
        run_id: String,
        got: u32,
        last: Option<u32>,
        expected: u32,
    },
}

/// Vector memory plus the embedder that feeds it. Reads take a shared lock;
/// writes are serialized.
pub struct SemanticMemory {
    embedder: Box<dyn Embedder>,
    inner: RwLock<VectorMemory>,
}

impl std::fmt::Debug for SemanticMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemanticMemory")
            .field("dimension", &self.embedder.dimension())
            .field("records", &self.len())
            .finish()
    }
}

impl SemanticMemory {
    pub fn new(embedder: Box<dyn Embedder>) -> Self {
        let dim = embedder.dimension();
        SemanticMemory {
            embedder,
            inner: RwLock::new(VectorMemory::new(dim)),
        }
    }

    pub fn hashing(dimension: usize) -> Self {
        Self::new(Box::new(HashingEmbedder::new(dimension)))
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, StoreError> {
        self.embedder.embed(text)
    }

    pub fn remember(
        &self,
        kind: MemoryKind,
        text: &str,
        payload_ref: Option<ArtifactAddress>,
        iteration: u32,
    ) -> Result<String, StoreError> {
        let v = self.embed(text)?;
        let summary: String = text.chars().take(160).collect();
        let mut inner = self.inner.write().expect("memory lock poisoned");
        Ok(inner.insert(kind, v, payload_ref, summary, iteration)?.record_id.clone())
    }

    pub fn recall(&self, text: &str, k: usize, kind: Option<MemoryKind>) -> Result<Vec<SimilarRecord>, StoreError> {
        let q = self.embed(text)?;
        let inner = self.inner.read().expect("memory lock poisoned");
        match kind {
            Some(kind) => inner.query_kind(&q, k, kind),
            None => inner.query_similar(&q, k),
        }
    }

    pub fn prune(&self, window: PruneWindow) -> Result<usize, StoreError> {
        self.inner.write().expect("memory lock poisoned").prune(window)
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("memory lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> VectorMemory {
        self.inner.read().expect("memory lock poisoned").clone()
    }
}

/// Per-run iteration metrics, gap-free and ascending. With a root directory
/// each run is mirrored to `<root>/<run_id>.jsonl`.
#[derive(Debug, Default)]
pub struct MetricsStore {
    root: Option<PathBuf>,
    runs: Mutex<HashMap<String, Vec<IterationMetrics>>>,
}

impl MetricsStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut runs = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let run_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mut history = Vec::new();
            for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
                let m: IterationMetrics = serde_json::from_str(line)
                    .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))?;
                history.push(m);
            }
            runs.insert(run_id, history);
        }
        Ok(MetricsStore {
            root: Some(root),
            runs: Mutex::new(runs),
        })
    }

    pub fn record(&self, run_id: &str, metrics: &IterationMetrics) -> Result<(), StoreError> {
        let mut runs = self.runs.lock().expect("metrics lock poisoned");
        let history = runs.entry(run_id.to_string()).or_default();
        let last = history.last().map(|m| m.iteration);
        let expected = last.map_or(metrics.iteration, |l| l + 1);
        if metrics.iteration != expected {
            return Err(StoreError::OutOfOrder {
                run_id: run_id.to_string(),
                got: metrics.iteration,
                last,
                expected,
            });
        }
        if let Some(root) = &self.root {
            let mut line = serde_json::to_string(metrics).expect("metrics serialize");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join(format!("{run_id}.jsonl")))?
                .write_all(line.as_bytes())?;
        }
        history.push(metrics.clone());
        Ok(())
    }

    pub fn history(&self, run_id: &str) -> Vec<IterationMetrics> {
        self.runs
            .lock()
            .expect("metrics lock poisoned")
            .get(run_id)
            .cloned()
            .unwrap_or_default()
    }
}

/// The three stores every agent shares.
#[derive(Debug)]
pub struct Stores {
    pub artifacts: ArtifactStore,
    pub memory: SemanticMemory,
    pub metrics: MetricsStore,
}

impl Stores {
    pub fn in_memory(dimension: usize) -> Self {
        Stores {
            artifacts: ArtifactStore::in_memory(),
            memory: SemanticMemory::hashing(dimension),
            metrics: MetricsStore::in_memory(),
        }
    }

    /// Artifacts under `<root>/artifacts`, metrics under `<root>/metrics`.
    /// Semantic memory is process-local.
    pub fn open(root: impl Into<PathBuf>, dimension: usize) -> Result<Self, StoreError> {
        let root = root.into();
        Ok(Stores {
            artifacts: ArtifactStore::open(root.join("artifacts"))?,
            memory: SemanticMemory::hashing(dimension),
            metrics: MetricsStore::open(root.join("metrics"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::IterationCounts;

    fn m(i: u32) -> IterationMetrics {
        IterationMetrics {
            iteration: i,
            coverage: 0.5,
            branch_coverage: None,
            failure_rate: 0.1,
            runtime_s: 1.0,
            counts: IterationCounts::default(),
        }
    }

    #[test]
    fn history_in_order() {
        let s = MetricsStore::in_memory();
        for i in 1..=3 {
            s.record("r", &m(i)).unwrap();
        }
        let its: Vec<_> = s.history("r").iter().map(|m| m.iteration).collect();
        assert_eq!(its, vec![1, 2, 3]);
        assert!(s.history("other").is_empty());
    }

    #[test]
    fn repeated_or_skipped_iteration_rejected() {
        let s = MetricsStore::in_memory();
        s.record("r", &m(2)).unwrap();
        assert!(matches!(s.record("r", &m(2)), Err(StoreError::OutOfOrder { .. })));
        assert!(matches!(s.record("r", &m(4)), Err(StoreError::OutOfOrder { .. })));
        assert!(matches!(s.record("r", &m(1)), Err(StoreError::OutOfOrder { .. })));
    }

    #[test]
    fn metrics_persist_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = MetricsStore::open(dir.path()).unwrap();
            s.record("run-a", &m(1)).unwrap();
            s.record("run-a", &m(2)).unwrap();
        }
        let s = MetricsStore::open(dir.path()).unwrap();
        assert_eq!(s.history("run-a").len(), 2);
        assert!(s.record("run-a", &m(2)).is_err());
    }

    #[test]
    fn semantic_memory_recalls_by_kind() {
        let mem = SemanticMemory::hashing(64);
        mem.remember(MemoryKind::CodeSnippet, "def add(a, b): return a + b", None, 1).unwrap();
        let id = mem
            .remember(MemoryKind::FailedTest, "AssertionError: expected 5 got 4", None, 1)
            .unwrap();
        let hits = mem
            .recall("AssertionError: expected 5 got 4", 1, Some(MemoryKind::FailedTest))
            .unwrap();
        assert_eq!(hits[0].record.record_id, id);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }
}
