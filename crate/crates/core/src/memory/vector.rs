//! Semantic vector memory with exact cosine retrieval and rolling-window
//! pruning.
//!
//! The default embedder hashes token 3-grams into `dimension` buckets and
//! L2-normalizes the counts. Tokens are maximal runs of alphanumeric or `_`
//! characters (lowercased); every other non-whitespace character is a token
//! on its own. Each gram is the three tokens joined by a single space
//! (texts with fewer than three tokens form one gram), hashed with SHA-256,
//! and the first eight bytes read big-endian select the bucket modulo
//! `dimension`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artifacts::ArtifactAddress;
use super::StoreError;

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryKind {
    CodeSnippet,
    FailedTest,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub record_id: String,
    pub kind: MemoryKind,
    pub embedding: Vec<f64>,
    pub payload_ref: Option<ArtifactAddress>,
    /// Short human-readable description of what was embedded.
    #[serde(default)]
    pub summary: String,
    pub iteration_stamp: u32,
    pub insertion_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarRecord {
    pub record: MemoryRecord,
    pub similarity: f64,
}

/// Anything that maps text onto a unit vector of fixed dimension.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, StoreError>;
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 1, "embedding dimension must be positive");
        HashingEmbedder { dimension }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_DIMENSION)
    }
}

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn bucket(gram: &str, dimension: usize) -> usize {
    let digest = Sha256::digest(gram.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) % dimension as u64) as usize
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, StoreError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(StoreError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        if tokens.len() < 3 {
            v[bucket(&tokens.join(" "), self.dimension)] += 1.0;
        } else {
            for w in tokens.windows(3) {
                v[bucket(&w.join(" "), self.dimension)] += 1.0;
            }
        }
        normalize(&mut v)?;
        Ok(v)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> Result<(), StoreError> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(StoreError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Rolling window for `prune`: keep records from the last
/// `window_iterations` iterations, and at most `max_records` of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneWindow {
    pub window_iterations: u32,
    pub max_records: usize,
}

impl Default for PruneWindow {
    fn default() -> Self {
        PruneWindow {
            window_iterations: 3,
            max_records: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VectorMemory {
    dimension: usize,
    records: Vec<MemoryRecord>,
    next_seq: u64,
    current_iteration: u32,
}

impl VectorMemory {
    pub fn new(dimension: usize) -> Self {
        VectorMemory {
            dimension,
            records: Vec::new(),
            next_seq: 0,
            current_iteration: 0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn current_iteration(&self) -> u32 {
        self.current_iteration
    }

    pub fn get(&self, record_id: &str) -> Option<&MemoryRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Stores `embedding` after normalizing it. The returned record id is
    /// `m<insertion_seq>`.
    pub fn insert(
        &mut self,
        kind: MemoryKind,
        mut embedding: Vec<f64>,
        payload_ref: Option<ArtifactAddress>,
        summary: impl Into<String>,
        iteration: u32,
    ) -> Result<&MemoryRecord, StoreError> {
        if embedding.len() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                actual: embedding.len(),
            });
        }
        normalize(&mut embedding)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.current_iteration = self.current_iteration.max(iteration);
        self.records.push(MemoryRecord {
            record_id: format!("m{seq}"),
            kind,
            embedding,
            payload_ref,
            summary: summary.into(),
            iteration_stamp: iteration,
            insertion_seq: seq,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Exact top-k by cosine similarity, descending; equal similarities
    /// keep insertion order.
    pub fn query_similar(&self, query: &[f64], k: usize) -> Result<Vec<SimilarRecord>, StoreError> {
        self.query_filtered(query, k, |_| true)
    }

    pub fn query_kind(&self, query: &[f64], k: usize, kind: MemoryKind) -> Result<Vec<SimilarRecord>, StoreError> {
        self.query_filtered(query, k, |r| r.kind == kind)
    }

    fn query_filtered(
        &self,
        query: &[f64],
        k: usize,
        keep: impl Fn(&MemoryRecord) -> bool,
    ) -> Result<Vec<SimilarRecord>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        if query.len() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        let qn = norm(query);
        let mut scored: Vec<(f64, &MemoryRecord)> = self
            .records
            .iter()
            .filter(|r| keep(r))
            .map(|r| {
                let dot: f64 = r.embedding.iter().zip(query).map(|(a, b)| a * b).sum();
                let sim = if qn == 0.0 { 0.0 } else { dot / qn };
                (sim, r)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.insertion_seq.cmp(&b.1.insertion_seq))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(similarity, r)| SimilarRecord {
                record: r.clone(),
                similarity,
            })
            .collect())
    }

    /// Drops records older than the iteration window, then the oldest
    /// insertions until at most `max_records` remain. Returns how many were
    /// removed.
    pub fn prune(&mut self, window: PruneWindow) -> Result<usize, StoreError> {
        if window.window_iterations < 1 || window.max_records < 1 {
            return Err(StoreError::InvalidWindow);
        }
        let before = self.records.len();
        let oldest_kept = self.current_iteration.saturating_sub(window.window_iterations);
        self.records.retain(|r| r.iteration_stamp > oldest_kept);
        if self.records.len() > window.max_records {
            // records are kept in insertion order
            let excess = self.records.len() - window.max_records;
            self.records.drain(..excess);
        }
        Ok(before - self.records.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, hot: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("AssertionError: expected 5, got 4").unwrap();
        let b = e.embed("AssertionError: expected 5, got 4").unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert_eq!(a.len(), DEFAULT_DIMENSION);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashingEmbedder::default();
        assert!(matches!(e.embed(""), Err(StoreError::EmptyText)));
        assert!(matches!(e.embed("  \n\t"), Err(StoreError::EmptyText)));
        assert!(e.embed("x").is_ok());
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Foo.bar(x)"), vec!["foo", ".", "bar", "(", "x", ")"]);
    }

    #[test]
    fn identical_vector_ranks_first() {
        let mut m = VectorMemory::new(4);
        m.insert(MemoryKind::Feedback, unit(4, 1), None, "a", 1).unwrap();
        m.insert(MemoryKind::Feedback, unit(4, 2), None, "b", 1).unwrap();
        let hits = m.query_similar(&unit(4, 2), 2).unwrap();
        assert_eq!(hits[0].record.record_id, "m1");
        assert_eq!(hits[0].similarity, 1.0);
        assert_eq!(hits[1].similarity, 0.0);
    }

    #[test]
    fn orthogonal_query_scores_zero() {
        let mut m = VectorMemory::new(3);
        m.insert(MemoryKind::CodeSnippet, unit(3, 0), None, "", 1).unwrap();
        let hits = m.query_similar(&unit(3, 2), 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].similarity, 0.0);
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut m = VectorMemory::new(2);
        for _ in 0..3 {
            m.insert(MemoryKind::Feedback, vec![1.0, 1.0], None, "", 1).unwrap();
        }
        let ids: Vec<_> = m
            .query_similar(&[1.0, 1.0], 3)
            .unwrap()
            .into_iter()
            .map(|h| h.record.insertion_seq)
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn dimension_mismatch_and_zero_k() {
        let mut m = VectorMemory::new(3);
        assert!(matches!(
            m.insert(MemoryKind::Feedback, vec![1.0], None, "", 1),
            Err(StoreError::DimensionMismatch { .. })
        ));
        assert!(matches!(m.query_similar(&[1.0, 0.0], 1), Err(StoreError::DimensionMismatch { .. })));
        assert!(matches!(m.query_similar(&[1.0, 0.0, 0.0], 0), Err(StoreError::InvalidK)));
    }

    #[test]
    fn prune_within_bounds_removes_nothing() {
        let mut m = VectorMemory::new(2);
        m.insert(MemoryKind::Feedback, vec![1.0, 0.0], None, "", 1).unwrap();
        assert_eq!(
            m.prune(PruneWindow {
                window_iterations: 5,
                max_records: 10
            })
            .unwrap(),
            0
        );
    }

    #[test]
    fn prune_twelve_records_over_six_iterations() {
        let mut m = VectorMemory::new(2);
        for it in 1..=6 {
            for j in 0..2 {
                m.insert(MemoryKind::FailedTest, vec![1.0, j as f64], None, "", it).unwrap();
            }
        }
        let removed = m
            .prune(PruneWindow {
                window_iterations: 2,
                max_records: 100,
            })
            .unwrap();
        // hand enumeration: iterations 1..=4 hold 8 records
        assert_eq!(removed, 8);
        let stamps: Vec<_> = m.records().iter().map(|r| r.iteration_stamp).collect();
        assert_eq!(stamps, vec![5, 5, 6, 6]);
    }

    #[test]
    fn prune_caps_record_count_oldest_first() {
        let mut m = VectorMemory::new(2);
        for _ in 0..5 {
            m.insert(MemoryKind::Feedback, vec![0.0, 1.0], None, "", 1).unwrap();
        }
        let before = m.query_similar(&[0.0, 1.0], 2).unwrap();
        assert_eq!(
            m.prune(PruneWindow {
                window_iterations: 10,
                max_records: 2
            })
            .unwrap(),
            3
        );
        let seqs: Vec<_> = m.records().iter().map(|r| r.insertion_seq).collect();
        assert_eq!(seqs, vec![3, 4]);
        let after = m.query_similar(&[0.0, 1.0], 2).unwrap();
        assert_eq!(after[0].record, m.records()[0]);
        assert_ne!(before[0].record.insertion_seq, after[0].record.insertion_seq);
        assert!(m.prune(PruneWindow { window_iterations: 0, max_records: 1 }).is_err());
    }
}
