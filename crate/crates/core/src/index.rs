//! Exact-search vector store.
//!
//! Entries are keyed by the SHA-256 of their text, so re-adding a chunk is a
//! no-op. Search scores every entry by cosine similarity and orders by score
//! descending, then id ascending.
//!
//! On disk an index is a directory with two files:
//!
//! - `manifest.json`: `{format, version, dim, provider_tag, entry_count, checksum}`,
//!   where `checksum` is `sha256:<hex>` of the entries file;
//! - `entries.jsonl`: one `{id, meta, embedding, text}` object per line, the
//!   embedding being base64 of the little-endian `f64` values.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, RwLock};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, EmbedError, Embedding};
use crate::DEFAULT_TOP_K;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const FORMAT_NAME: &str = "medrag-index";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("provider mismatch: index holds {expected:?}, got {got:?}")]
    ProviderMismatch { expected: String, got: String },
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query embedding: {0}")]
    Query(#[from] EmbedError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index: {0}")]
    CorruptManifest(String),
    #[error("unsupported index format {found}; this build reads {FORMAT_NAME} v{FORMAT_VERSION}")]
    VersionMismatch { found: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub source_doc: String,
    pub char_span: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub text: String,
    pub embedding: Embedding,
    pub meta: EntryMeta,
}

/// Hex SHA-256 of the text.
pub fn content_id(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl IndexEntry {
    pub fn new(text: impl Into<String>, embedding: Embedding, meta: EntryMeta) -> Self {
        let text = text.into();
        Self {
            id: content_id(&text),
            text,
            embedding,
            meta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddOutcome {
    Inserted,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry: IndexEntry,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dim: Option<usize>,
    pub provider_tag: Option<String>,
    pub entry_count: usize,
    pub checksum: String,
}

#[derive(Serialize, Deserialize)]
struct StoredEntry {
    id: String,
    meta: EntryMeta,
    embedding: String,
    text: String,
}

/// Many readers or one writer; `persist` under a read guard is a consistent snapshot.
pub type SharedIndex = Arc<RwLock<VectorIndex>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dim: Option<usize>,
    provider_tag: Option<String>,
    entries: Vec<IndexEntry>,
    by_id: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_shared(self) -> SharedIndex {
        Arc::new(RwLock::new(self))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fixed by the first insert.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn provider_tag(&self) -> Option<&str> {
        self.provider_tag.as_deref()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    fn check(
        &self,
        entry: &IndexEntry,
        dim: Option<usize>,
        tag: Option<&str>,
    ) -> Result<(), IndexError> {
        if entry.id != content_id(&entry.text) {
            return Err(IndexError::InvalidEntry(format!(
                "id {} is not the hash of its text",
                entry.id
            )));
        }
        if entry.embedding.dim() == 0 || entry.embedding.is_zero() || !entry.embedding.is_finite() {
            return Err(IndexError::InvalidEntry(format!(
                "entry {} has an unusable embedding",
                entry.id
            )));
        }
        if let Some(expected) = dim {
            if entry.embedding.dim() != expected {
                return Err(IndexError::DimMismatch {
                    expected,
                    got: entry.embedding.dim(),
                });
            }
        }
        if let Some(expected) = tag {
            if entry.embedding.provider_tag != expected {
                return Err(IndexError::ProviderMismatch {
                    expected: expected.to_string(),
                    got: entry.embedding.provider_tag.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn add(&mut self, entry: IndexEntry) -> Result<AddOutcome, IndexError> {
        self.check(&entry, self.dim, self.provider_tag.as_deref())?;
        Ok(self.insert_checked(entry))
    }

    fn insert_checked(&mut self, entry: IndexEntry) -> AddOutcome {
        if self.by_id.contains_key(&entry.id) {
            return AddOutcome::Duplicate;
        }
        self.dim.get_or_insert(entry.embedding.dim());
        self.provider_tag
            .get_or_insert_with(|| entry.embedding.provider_tag.clone());
        self.by_id.insert(entry.id.clone(), self.entries.len());
        self.entries.push(entry);
        AddOutcome::Inserted
    }

    /// Adds every entry or none. Returns `(inserted, duplicates)`.
    pub fn add_all(&mut self, entries: Vec<IndexEntry>) -> Result<(usize, usize), IndexError> {
        let mut dim = self.dim;
        let mut tag = self.provider_tag.clone();
        for entry in &entries {
            self.check(entry, dim, tag.as_deref())?;
            dim.get_or_insert(entry.embedding.dim());
            tag.get_or_insert_with(|| entry.embedding.provider_tag.clone());
        }
        let mut counts = (0, 0);
        for entry in entries {
            match self.insert_checked(entry) {
                AddOutcome::Inserted => counts.0 += 1,
                AddOutcome::Duplicate => counts.1 += 1,
            }
        }
        Ok(counts)
    }

    /// The `min(k, len)` most similar entries.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if let Some(expected) = self.dim {
            if query.dim() != expected {
                return Err(IndexError::DimMismatch {
                    expected,
                    got: query.dim(),
                });
            }
        }
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| cosine(query, &e.embedding).map(|s| (s, e)))
            .collect::<Result<Vec<_>, _>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, entry))| SearchHit {
                entry: entry.clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    pub fn search_default(&self, query: &Embedding) -> Result<Vec<SearchHit>, IndexError> {
        self.search(query, DEFAULT_TOP_K)
    }

    /// Writes the index into `dir`, creating it if needed.
    pub fn persist(&self, dir: &Path) -> Result<Manifest, IndexError> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for e in &self.entries {
            let stored = StoredEntry {
                id: e.id.clone(),
                meta: e.meta.clone(),
                embedding: encode_values(&e.embedding.values),
                text: e.text.clone(),
            };
            serde_json::to_writer(&mut entries, &stored).map_err(std::io::Error::other)?;
            entries.push(b'\n');
        }
        let manifest = Manifest {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            dim: self.dim,
            provider_tag: self.provider_tag.clone(),
            entry_count: self.entries.len(),
            checksum: checksum(&entries),
        };
        write_atomic(&dir.join(ENTRIES_FILE), &entries)?;
        let manifest_json = serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest_json)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        if !dir.is_dir() {
            return Err(IndexError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} is not a directory", dir.display()),
            )));
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            IndexError::CorruptManifest(format!("{}: {e}", manifest_path.display()))
        })?;
        let raw: serde_json::Value = serde_json::from_str(&manifest_text)
            .map_err(|e| IndexError::CorruptManifest(format!("manifest is not JSON: {e}")))?;
        let format = raw
            .get("format")
            .and_then(|v| v.as_str())
            .unwrap_or_default();
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .unwrap_or_default();
        if format != FORMAT_NAME || version != u64::from(FORMAT_VERSION) {
            return Err(IndexError::VersionMismatch {
                found: format!("{format} v{version}"),
            });
        }
        let manifest: Manifest = serde_json::from_value(raw)
            .map_err(|e| IndexError::CorruptManifest(format!("manifest fields: {e}")))?;

        let entries = std::fs::read(dir.join(ENTRIES_FILE))
            .map_err(|e| IndexError::CorruptManifest(format!("entries file: {e}")))?;
        if checksum(&entries) != manifest.checksum {
            return Err(IndexError::CorruptManifest(
                "entries checksum mismatch".into(),
            ));
        }
        let entries = std::str::from_utf8(&entries)
            .map_err(|_| IndexError::CorruptManifest("entries file is not UTF-8".into()))?;

        let tag = manifest.provider_tag.clone().unwrap_or_default();
        let mut index = VectorIndex::new();
        for (n, line) in entries.lines().enumerate() {
            let stored: StoredEntry = serde_json::from_str(line)
                .map_err(|e| IndexError::CorruptManifest(format!("entry line {}: {e}", n + 1)))?;
            let values = decode_values(&stored.embedding).ok_or_else(|| {
                IndexError::CorruptManifest(format!("entry line {}: bad embedding", n + 1))
            })?;
            let entry = IndexEntry {
                id: stored.id,
                text: stored.text,
                embedding: Embedding::new(values, tag.clone()),
                meta: stored.meta,
            };
            if index.add(entry)? == AddOutcome::Duplicate {
                return Err(IndexError::CorruptManifest(format!(
                    "entry line {} duplicates an id",
                    n + 1
                )));
            }
        }
        if index.len() != manifest.entry_count || (index.dim.is_some() && index.dim != manifest.dim)
        {
            return Err(IndexError::CorruptManifest(
                "manifest does not describe the entries".into(),
            ));
        }
        index.dim = manifest.dim;
        index.provider_tag = manifest.provider_tag;
        Ok(index)
    }
}

fn checksum(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn encode_values(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_values(text: &str) -> Option<Vec<f64>> {
    let bytes = B64.decode(text).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}
