//! Text embeddings and cosine similarity.
//!
//! The local provider hashes character trigrams of the lowercased,
//! whitespace-collapsed text into `dim` signed buckets and L2-normalises the
//! counts. Hashing is FNV-1a with a fixed seed followed by a 64-bit finaliser,
//! so vectors are identical across processes and platforms.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::transport::{RemoteClient, RemoteConfig, RemoteError, Transport, UreqTransport};
use crate::DEFAULT_EMBED_DIM;

/// Smallest dimension accepted by the local provider.
pub const MIN_LOCAL_DIM: usize = 8;
const HASH_SEED: u64 = 0x6d65_6472_6167_0001;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("invalid embedding request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub provider_tag: String,
}

impl Embedding {
    pub fn new(values: Vec<f64>, provider_tag: impl Into<String>) -> Self {
        Self {
            values,
            provider_tag: provider_tag.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn local_provider_tag(dim: usize) -> String {
    format!("local-trigram-v1/{dim}")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ HASH_SEED;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finaliser spreads FNV's weak low bits
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Lowercases and collapses whitespace runs to single spaces.
fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic trigram-hashing embedding. Whitespace-only text yields the all-zero vector.
///
/// Texts shorter than three characters hash as a single gram.
pub fn embed_local(text: &str, dim: usize) -> Embedding {
    assert!(
        dim >= MIN_LOCAL_DIM,
        "local embedding dim must be at least {MIN_LOCAL_DIM}"
    );
    let normalized = normalize(text);
    let chars: Vec<char> = normalized.chars().collect();
    let mut values = vec![0.0f64; dim];
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let h = fnv1a(s.as_bytes());
        let bucket = (h % dim as u64) as usize;
        values[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    match chars.len() {
        0 => {}
        1 | 2 => add(&chars),
        _ => chars.windows(3).for_each(&mut add),
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Embedding::new(values, local_provider_tag(dim))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    cosine_slices(&a.values, &b.values)
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn provider_tag(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        self.embed_batch(&[text.to_string()])?
            .pop()
            .ok_or_else(|| EmbedError::Invalid("provider returned no embedding".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalEmbedder {
    dim: usize,
}

impl LocalEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < MIN_LOCAL_DIM {
            return Err(EmbedError::Invalid(format!(
                "local dim must be at least {MIN_LOCAL_DIM}, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Default for LocalEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl Embedder for LocalEmbedder {
    fn provider_tag(&self) -> String {
        local_provider_tag(self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        Ok(texts.iter().map(|t| embed_local(t, self.dim)).collect())
    }
}

/// Client for an embeddings endpoint: `{model, input: [..]}` in, `data[i].embedding` out.
pub struct RemoteEmbedder {
    client: RemoteClient,
    batch_size: usize,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig, transport: Arc<dyn Transport>) -> Self {
        Self {
            client: RemoteClient::new(config, transport),
            batch_size: 64,
        }
    }

    /// Configured from `EMBED_ENDPOINT`, `EMBED_MODEL` and `EMBED_API_KEY`.
    pub fn from_env() -> Result<Self, EmbedError> {
        Ok(Self::new(
            RemoteConfig::from_env("EMBED")?,
            Arc::new(UreqTransport::default()),
        ))
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    fn request_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let body = json!({ "model": self.client.config().model, "input": texts });
        let reply = self.client.call(&body)?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| RemoteError::Malformed("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(RemoteError::Malformed(format!(
                "{} inputs but {} embeddings",
                texts.len(),
                data.len()
            ))
            .into());
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| RemoteError::Malformed(format!("data[{pos}] has no `embedding`")))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| RemoteError::Malformed("non-numeric embedding value".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, values));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn provider_tag(&self) -> String {
        format!("remote:{}", self.client.config().model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let tag = self.provider_tag();
        let mut out: Vec<Embedding> = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            for values in self.request_batch(batch)? {
                if let Some(first) = out.first() {
                    if first.dim() != values.len() {
                        return Err(EmbedError::DimMismatch {
                            expected: first.dim(),
                            got: values.len(),
                        });
                    }
                }
                let embedding = Embedding::new(values, tag.clone());
                if embedding.dim() == 0 || !embedding.is_finite() {
                    return Err(
                        RemoteError::Malformed("empty or non-finite embedding".into()).into(),
                    );
                }
                out.push(embedding);
            }
        }
        Ok(out)
    }
}
