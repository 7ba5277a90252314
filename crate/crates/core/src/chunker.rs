//! Recursive, budget-bounded text splitting.
//!
//! Budgets are measured in token units, where a unit is a maximal run of
//! non-whitespace characters. Splitting works on byte spans of the source so
//! every chunk maps back to an exact slice of the document:
//!
//! 1. cut the text at the first separator; any piece still over budget is cut
//!    again with the next separator, down to the empty-string (per character) fallback;
//! 2. adjacent pieces are merged greedily while the merged slice fits the budget;
//! 3. each new chunk starts with up to `overlap_units` trailing words of the previous one.

use serde::{Deserialize, Serialize};

use crate::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_UNITS};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ChunkError {
    #[error("degenerate chunk config: {0}")]
    DegenerateConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub max_units: usize,
    pub overlap_units: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            max_units: DEFAULT_CHUNK_UNITS,
            overlap_units: DEFAULT_CHUNK_OVERLAP,
            separators: default_separators(),
        }
    }
}

pub fn default_separators() -> Vec<String> {
    ["\n\n", "\n", ". ", "? ", "! ", " ", ""]
        .map(String::from)
        .to_vec()
}

impl ChunkConfig {
    pub fn new(max_units: usize, overlap_units: usize) -> Result<Self, ChunkError> {
        let config = Self {
            max_units,
            overlap_units,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.separators.is_empty() {
            return Err(ChunkError::DegenerateConfig("empty separator list".into()));
        }
        if self.max_units == 0 {
            return Err(ChunkError::DegenerateConfig(
                "max_units must be at least 1".into(),
            ));
        }
        if self.overlap_units >= self.max_units {
            return Err(ChunkError::DegenerateConfig(format!(
                "overlap_units ({}) must be below max_units ({})",
                self.overlap_units, self.max_units
            )));
        }
        if self.separators.last().map(String::as_str) != Some("") {
            return Err(ChunkError::DegenerateConfig(
                "separator list must end with the empty-string fallback".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub text: String,
    pub token_estimate: usize,
    pub source_doc: String,
    /// Byte offsets `[start, end)` of `text` in the source document.
    pub char_span: (usize, usize),
}

/// Number of maximal non-whitespace runs.
pub fn estimate_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Byte spans of the words of a document, for O(log n) budget checks on sub-slices.
struct WordMap {
    spans: Vec<(usize, usize)>,
}

impl WordMap {
    fn new(text: &str) -> Self {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    spans.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push((s, text.len()));
        }
        Self { spans }
    }

    /// Index range of the words intersecting `[a, b)`.
    fn range(&self, a: usize, b: usize) -> (usize, usize) {
        let first = self.spans.partition_point(|w| w.1 <= a);
        if a >= b {
            return (first, first);
        }
        let last = self.spans.partition_point(|w| w.0 < b);
        (first, last.max(first))
    }

    /// Equals `estimate_tokens(&text[a..b])`; a word cut by the slice still counts once.
    fn count(&self, a: usize, b: usize) -> usize {
        let (first, last) = self.range(a, b);
        last - first
    }
}

struct Splitter<'a> {
    text: &'a str,
    words: WordMap,
    config: &'a ChunkConfig,
}

impl Splitter<'_> {
    /// Cuts `[a, b)` after every occurrence of `sep`; the empty separator cuts between characters.
    fn cut(&self, a: usize, b: usize, sep: &str) -> Vec<(usize, usize)> {
        let slice = &self.text[a..b];
        let mut bounds: Vec<usize> = if sep.is_empty() {
            slice.char_indices().skip(1).map(|(i, _)| a + i).collect()
        } else {
            slice
                .match_indices(sep)
                .map(|(i, m)| a + i + m.len())
                .filter(|&e| e < b)
                .collect()
        };
        bounds.push(b);
        let mut start = a;
        bounds
            .into_iter()
            .map(|end| {
                let piece = (start, end);
                start = end;
                piece
            })
            .collect()
    }

    /// Pieces covering `[a, b)` in order, each within budget unless no separator can cut it.
    fn atomize(&self, a: usize, b: usize, level: usize, out: &mut Vec<(usize, usize)>) {
        if self.words.count(a, b) <= self.config.max_units || level >= self.config.separators.len()
        {
            out.push((a, b));
            return;
        }
        let pieces = self.cut(a, b, &self.config.separators[level]);
        if pieces.len() == 1 {
            self.atomize(a, b, level + 1, out);
            return;
        }
        for (pa, pb) in pieces {
            self.atomize(pa, pb, level + 1, out);
        }
    }

    fn trimmed(&self, a: usize, b: usize) -> (usize, usize) {
        let slice = &self.text[a..b];
        let lead = slice.len() - slice.trim_start().len();
        let trail = slice.len() - slice.trim_end().len();
        if lead == slice.len() {
            (a, a)
        } else {
            (a + lead, b - trail)
        }
    }

    fn chunks(&self, source_doc: &str) -> Vec<Chunk> {
        let mut atoms = Vec::new();
        self.atomize(0, self.text.len(), 0, &mut atoms);

        let mut spans: Vec<(usize, usize)> = Vec::new();
        let mut current: Option<(usize, usize)> = None;
        for (a, b) in atoms {
            current = Some(match current {
                None => (a, b),
                Some((s, _)) if self.words.count(s, b) <= self.config.max_units => (s, b),
                Some((s, e)) => {
                    let (ts, te) = self.trimmed(s, e);
                    if ts < te {
                        spans.push((ts, te));
                    }
                    (self.overlap_start(ts, te, a, b), b)
                }
            });
        }
        if let Some((s, e)) = current {
            let (ts, te) = self.trimmed(s, e);
            if ts < te {
                spans.push((ts, te));
            }
        }

        spans
            .into_iter()
            .map(|(s, e)| {
                let text = self.text[s..e].to_string();
                let token_estimate = estimate_tokens(&text);
                debug_assert_eq!(token_estimate, self.words.count(s, e));
                Chunk {
                    text,
                    token_estimate,
                    source_doc: source_doc.to_string(),
                    char_span: (s, e),
                }
            })
            .collect()
    }

    /// Start of the next chunk: the start of one of the trailing words of the previous
    /// chunk `[ps, pe)`, or the start of the next piece `[a, b)` when no overlap fits.
    fn overlap_start(&self, ps: usize, pe: usize, a: usize, b: usize) -> usize {
        let (first, last) = self.words.range(ps, pe);
        let prev_words = last - first;
        // never repeat the whole previous chunk, so starts strictly increase
        let mut w = self.config.overlap_units.min(prev_words.saturating_sub(1));
        while w > 0 {
            let start = self.words.spans[last - w].0;
            if self.words.count(start, b) <= self.config.max_units {
                return start;
            }
            w -= 1;
        }
        a
    }
}

/// Splits `text` into budget-bounded chunks with an empty source id.
pub fn split_recursive(text: &str, config: &ChunkConfig) -> Result<Vec<Chunk>, ChunkError> {
    split_document("", text, config)
}

pub fn split_document(
    source_doc: &str,
    text: &str,
    config: &ChunkConfig,
) -> Result<Vec<Chunk>, ChunkError> {
    config.validate()?;
    let splitter = Splitter {
        text,
        words: WordMap::new(text),
        config,
    };
    Ok(splitter.chunks(source_doc))
}
