//! Content-addressed artifact registry.
//!
//! On disk the store is a directory:
//!
//! ```text
//! <root>/objects/<hh>/<sha256-hex>      raw bytes, hh = first two hex chars
//! <root>/index.jsonl                    one line per first-time put
//! ```
//!
//! Index lines are `{"digest": .., "media_type": .., "size": .., "stored_at": ..}`.
//! The index is append-only; a digest already present is never re-appended.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MediaType {
    #[serde(rename = "suite")]
    Suite,
    #[serde(rename = "result-document")]
    ResultDocument,
    #[serde(rename = "loop-report")]
    LoopReport,
    #[serde(rename = "feedback")]
    Feedback,
    #[serde(rename = "failure-record")]
    FailureRecord,
    #[serde(rename = "test-source")]
    TestSource,
    #[serde(rename = "lineage")]
    Lineage,
    #[serde(rename = "config")]
    Config,
    #[serde(rename = "quarantine")]
    Quarantine,
}

impl MediaType {
    pub const ALL: [MediaType; 9] = [
        MediaType::Suite,
        MediaType::ResultDocument,
        MediaType::LoopReport,
        MediaType::Feedback,
        MediaType::FailureRecord,
        MediaType::TestSource,
        MediaType::Lineage,
        MediaType::Config,
        MediaType::Quarantine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MediaType::Suite => "suite",
            MediaType::ResultDocument => "result-document",
            MediaType::LoopReport => "loop-report",
            MediaType::Feedback => "feedback",
            MediaType::FailureRecord => "failure-record",
            MediaType::TestSource => "test-source",
            MediaType::Lineage => "lineage",
            MediaType::Config => "config",
            MediaType::Quarantine => "quarantine",
        }
    }
}

impl FromStr for MediaType {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MediaType::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| StoreError::Corrupt(format!("unknown media type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactAddress {
    pub digest: String,
    pub media_type: MediaType,
}

impl ArtifactAddress {
    pub fn for_bytes(bytes: &[u8], media_type: MediaType) -> Self {
        ArtifactAddress {
            digest: hex::encode(Sha256::digest(bytes)),
            media_type,
        }
    }
}

/// Rendered as `<media-type>:<digest>`.
impl fmt::Display for ArtifactAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.media_type.as_str(), self.digest)
    }
}

impl FromStr for ArtifactAddress {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (media, digest) = s
            .split_once(':')
            .ok_or_else(|| StoreError::Corrupt(format!("malformed address `{s}`")))?;
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::Corrupt(format!("malformed digest in `{s}`")));
        }
        Ok(ArtifactAddress {
            digest: digest.to_ascii_lowercase(),
            media_type: media.parse()?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub digest: String,
    pub media_type: MediaType,
    pub size: u64,
    pub stored_at: DateTime<Utc>,
}

#[derive(Debug, Default)]
struct Inner {
    blobs: HashMap<String, Vec<u8>>,
    index: Vec<IndexEntry>,
}

/// Artifact registry. `open` persists to a directory; `in_memory` keeps
/// everything in process.
#[derive(Debug)]
pub struct ArtifactStore {
    root: Option<PathBuf>,
    inner: RwLock<Inner>,
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        ArtifactStore {
            root: None,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        let mut inner = Inner::default();
        let index_path = root.join("index.jsonl");
        if index_path.exists() {
            for (n, line) in fs::read_to_string(&index_path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: IndexEntry = serde_json::from_str(line)
                    .map_err(|e| StoreError::Corrupt(format!("index line {}: {e}", n + 1)))?;
                inner.index.push(entry);
            }
        }
        Ok(ArtifactStore {
            root: Some(root),
            inner: RwLock::new(inner),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn object_path(root: &Path, digest: &str) -> PathBuf {
        root.join("objects").join(&digest[..2]).join(digest)
    }

    /// Idempotent: storing the same bytes twice yields the same address and
    /// a single index entry.
    pub fn put(&self, bytes: &[u8], media_type: MediaType) -> Result<ArtifactAddress, StoreError> {
        let address = ArtifactAddress::for_bytes(bytes, media_type);
        let mut inner = self.inner.write().expect("artifact store lock poisoned");
        let known = inner.index.iter().any(|e| e.digest == address.digest && e.media_type == media_type);
        if known {
            return Ok(address);
        }
        if let Some(root) = &self.root {
            let path = Self::object_path(root, &address.digest);
            if !path.exists() {
                fs::create_dir_all(path.parent().expect("object path has a parent"))?;
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, bytes)?;
                fs::rename(&tmp, &path)?;
            }
        } else {
            inner.blobs.insert(address.digest.clone(), bytes.to_vec());
        }
        let entry = IndexEntry {
            digest: address.digest.clone(),
            media_type,
            size: bytes.len() as u64,
            stored_at: Utc::now(),
        };
        if let Some(root) = &self.root {
            let mut line = serde_json::to_string(&entry).expect("index entry serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join("index.jsonl"))?
                .write_all(line.as_bytes())?;
        }
        inner.index.push(entry);
        Ok(address)
    }

    pub fn put_json<T: Serialize>(&self, value: &T, media_type: MediaType) -> Result<ArtifactAddress, StoreError> {
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        self.put(&bytes, media_type)
    }

    pub fn get(&self, address: &ArtifactAddress) -> Result<Vec<u8>, StoreError> {
        let inner = self.inner.read().expect("artifact store lock poisoned");
        let known = inner
            .index
            .iter()
            .any(|e| e.digest == address.digest && e.media_type == address.media_type);
        if !known {
            return Err(StoreError::NotFound(address.to_string()));
        }
        let bytes = match &self.root {
            Some(root) => fs::read(Self::object_path(root, &address.digest))?,
            None => inner
                .blobs
                .get(&address.digest)
                .cloned()
                .ok_or_else(|| StoreError::NotFound(address.to_string()))?,
        };
        if ArtifactAddress::for_bytes(&bytes, address.media_type) != *address {
            return Err(StoreError::Corrupt(format!("content of {address} does not match its digest")));
        }
        Ok(bytes)
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, address: &ArtifactAddress) -> Result<T, StoreError> {
        let bytes = self.get(address)?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("{address}: {e}")))
    }

    pub fn contains(&self, address: &ArtifactAddress) -> bool {
        self.inner
            .read()
            .expect("artifact store lock poisoned")
            .index
            .iter()
            .any(|e| e.digest == address.digest && e.media_type == address.media_type)
    }

    pub fn index(&self) -> Vec<IndexEntry> {
        self.inner.read().expect("artifact store lock poisoned").index.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("artifact store lock poisoned").index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn put_is_idempotent_and_round_trips() {
        let store = ArtifactStore::in_memory();
        let a = store.put(b"hello", MediaType::Suite).unwrap();
        let b = store.put(b"hello", MediaType::Suite).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 1);
        assert_eq!(store.get(&a).unwrap(), b"hello");
        assert_ne!(a, store.put(b"hello!", MediaType::Suite).unwrap());
    }

    #[test]
    fn unknown_address_is_not_found() {
        let store = ArtifactStore::in_memory();
        let addr = ArtifactAddress::for_bytes(b"x", MediaType::Suite);
        assert!(matches!(store.get(&addr), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn address_text_form_round_trips() {
        let addr = ArtifactAddress::for_bytes(b"abc", MediaType::ResultDocument);
        let text = addr.to_string();
        assert!(text.starts_with("result-document:"));
        assert_eq!(text.parse::<ArtifactAddress>().unwrap(), addr);
        assert!("suite:xyz".parse::<ArtifactAddress>().is_err());
    }

    #[test]
    fn on_disk_store_reopens_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let addr = {
            let store = ArtifactStore::open(dir.path()).unwrap();
            store.put(b"persisted", MediaType::LoopReport).unwrap()
        };
        let reopened = ArtifactStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&addr).unwrap(), b"persisted");
        let lines = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 1);
        reopened.put(b"persisted", MediaType::LoopReport).unwrap();
        let lines = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }

    #[test]
    fn tampered_object_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let addr = store.put(b"original", MediaType::Suite).unwrap();
        fs::write(ArtifactStore::object_path(dir.path(), &addr.digest), b"changed").unwrap();
        assert!(matches!(store.get(&addr), Err(StoreError::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn address_depends_only_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let s1 = ArtifactStore::in_memory();
            let s2 = ArtifactStore::in_memory();
            s2.put(b"unrelated prior content", MediaType::Suite).unwrap();
            let a1 = s1.put(&bytes, MediaType::Suite).unwrap();
            let a2 = s2.put(&bytes, MediaType::Suite).unwrap();
            prop_assert_eq!(&a1, &a2);
            prop_assert_eq!(s1.get(&a1).unwrap(), bytes);
        }
    }
}
