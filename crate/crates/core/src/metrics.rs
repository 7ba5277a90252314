//! Reference-based text generation metrics.
//!
//! Every metric shares one tokenizer: lowercase, split on whitespace, strip
//! non-alphanumeric characters from both token edges, drop empty tokens.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_slices, embed_local};
use crate::DEFAULT_EMBED_DIM;

pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("candidate has no tokens")]
    EmptyCandidate,
    #[error("no reference has any tokens")]
    EmptyReferences,
    #[error("candidate and reference must both have tokens")]
    EmptyInput,
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Adds [`BLEU_EPSILON`] to zero clipped counts.
    AddEpsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::uniform(4)
    }
}

impl BleuConfig {
    pub fn uniform(max_n: usize) -> Self {
        Self {
            max_n,
            weights: vec![1.0 / max_n as f64; max_n],
            smoothing: Smoothing::None,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.max_n == 0 || self.weights.len() != self.max_n {
            return Err(MetricError::InvalidConfig(format!(
                "need max_n >= 1 and one weight per order, got max_n {} and {} weights",
                self.max_n,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return Err(MetricError::InvalidConfig(
                "BLEU weights must be positive".into(),
            ));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MetricError::InvalidConfig(format!(
                "BLEU weights sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-free sentence BLEU against one or more references.
///
/// Orders longer than the candidate have no n-grams to count; they are left out
/// and the remaining weights renormalised.
pub fn bleu(candidate: &str, references: &[&str], config: &BleuConfig) -> Result<f64, MetricError> {
    config.validate()?;
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Err(MetricError::EmptyCandidate);
    }
    let refs: Vec<Vec<String>> = references
        .iter()
        .map(|r| tokenize(r))
        .filter(|r| !r.is_empty())
        .collect();
    if refs.is_empty() {
        return Err(MetricError::EmptyReferences);
    }

    let mut log_sum = 0.0;
    let mut weight_used = 0.0;
    for n in 1..=config.max_n {
        if cand.len() < n {
            break;
        }
        let total = cand.len() - n + 1;
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (gram, count) in ngram_counts(r, n) {
                let slot = max_ref.entry(gram).or_insert(0);
                *slot = (*slot).max(count);
            }
        }
        let clipped: usize = ngram_counts(&cand, n)
            .into_iter()
            .map(|(gram, count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = match (clipped, config.smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::AddEpsilon) => BLEU_EPSILON / total as f64,
            _ => clipped as f64 / total as f64,
        };
        let w = config.weights[n - 1];
        log_sum += w * precision.ln();
        weight_used += w;
    }

    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("at least one reference");
    let bp = brevity_penalty(c, r);
    Ok((bp * (log_sum / weight_used).exp()).clamp(0.0, 1.0))
}

/// `1` when the candidate is longer than the reference, else `exp(1 - r/c)`.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidConfig("ROUGE-N needs n >= 1".into()));
    }
    let (cand, refr) = (tokenize(candidate), tokenize(reference));
    if cand.is_empty() || refr.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refr, n);
    let overlap: usize = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total: usize = cand_counts.values().sum();
    let ref_total: usize = ref_counts.values().sum();
    let ratio = |total: usize| {
        if total == 0 {
            0.0
        } else {
            overlap as f64 / total as f64
        }
    };
    Ok(Prf::new(ratio(cand_total), ratio(ref_total)))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(row[j])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Result<Prf, MetricError> {
    let (cand, refr) = (tokenize(candidate), tokenize(reference));
    if cand.is_empty() || refr.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    Ok(Prf::new(lcs / cand.len() as f64, lcs / refr.len() as f64))
}

/// Per-token vectors for [`bert_score`]. Vectors should be unit-norm.
pub trait TokenEmbedder: Sync {
    fn embed_token(&self, token: &str) -> Vec<f64>;
}

/// Trigram-hashing vectors from the local embedder.
#[derive(Debug, Clone, Copy)]
pub struct LocalTokenEmbedder {
    pub dim: usize,
}

impl Default for LocalTokenEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl TokenEmbedder for LocalTokenEmbedder {
    fn embed_token(&self, token: &str) -> Vec<f64> {
        embed_local(token, self.dim).values
    }
}

/// One basis vector per vocabulary token; unknown tokens map to the zero vector.
#[derive(Debug, Clone, Default)]
pub struct OneHotTokenEmbedder {
    vocab: HashMap<String, usize>,
}

impl OneHotTokenEmbedder {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut vocab = HashMap::new();
        for t in texts {
            for token in tokenize(t.as_ref()) {
                let next = vocab.len();
                vocab.entry(token).or_insert(next);
            }
        }
        Self { vocab }
    }
}

impl TokenEmbedder for OneHotTokenEmbedder {
    fn embed_token(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab.len().max(1)];
        if let Some(&i) = self.vocab.get(token) {
            v[i] = 1.0;
        }
        v
    }
}

/// Greedy-matching BERTScore over pluggable token vectors.
///
/// Each candidate token is matched to its most similar reference token and vice
/// versa. Identical tokens match at exactly 1; best-match similarities below 0
/// count as 0 so the scores stay in `[0, 1]`.
pub fn bert_score(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
) -> Result<Prf, MetricError> {
    let (cand, refr) = (tokenize(candidate), tokenize(reference));
    if cand.is_empty() || refr.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for t in cand.iter().chain(&refr) {
        cache
            .entry(t.as_str())
            .or_insert_with(|| embedder.embed_token(t));
    }
    let sim = |a: &str, b: &str| -> f64 {
        if a == b {
            return 1.0;
        }
        cosine_slices(&cache[a], &cache[b]).unwrap_or(0.0)
    };
    let greedy = |from: &[String], to: &[String]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|x| {
                to.iter()
                    .map(|y| sim(x, y))
                    .fold(f64::NEG_INFINITY, f64::max)
                    .max(0.0)
            })
            .sum();
        total / from.len() as f64
    };
    Ok(Prf::new(greedy(&cand, &refr), greedy(&refr, &cand)))
}

/// Which ROUGE statistic fills the single ROUGE column of a report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum RougeVariant {
    #[default]
    L,
    N(usize),
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RougeVariant::L => f.write_str("ROUGE-L F1"),
            RougeVariant::N(n) => write!(f, "ROUGE-{n} F1"),
        }
    }
}

impl RougeVariant {
    pub fn score(&self, candidate: &str, reference: &str) -> Result<f64, MetricError> {
        Ok(match self {
            RougeVariant::L => rouge_l(candidate, reference)?.f1,
            RougeVariant::N(n) => rouge_n(candidate, reference, *n)?.f1,
        })
    }
}
