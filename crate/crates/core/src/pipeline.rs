//! Retrieve-then-generate loop and chat sessions.
//!
//! Each turn embeds only the current query; earlier turns are kept in the
//! session history but are not fed back into retrieval or the prompt.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::{split_document, ChunkConfig, ChunkError};
use crate::corpus::KnowledgeDocument;
use crate::embed::{EmbedError, Embedder};
use crate::genkit::{
    assemble_prompt, ContextChunk, GenError, GenerationParams, Generator, PromptBundle, Usage,
};
use crate::index::{EntryMeta, IndexEntry, IndexError, SearchHit, VectorIndex};
use crate::{DEFAULT_RESERVE_UNITS, DEFAULT_TOP_K, DEFAULT_WINDOW_UNITS};

pub const MIN_WINDOW_UNITS: usize = 256;

/// Shown alongside every generated reply.
pub const DISCLAIMER: &str = "This information is not a substitute for professional medical advice; consult a qualified clinician.";

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a medical assistant. Answer the patient's question using the doctor-patient conversations provided as context, and say so when the context does not cover the question.\nThis information is not a substitute for professional medical advice; consult a qualified clinician.";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("retrieval failed: {0}")]
    Index(#[from] IndexError),
    #[error("generation failed: {0}")]
    Generate(#[from] GenError),
    #[error("chunking failed: {0}")]
    Chunk(#[from] ChunkError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub k: usize,
    pub window_units: usize,
    pub reserve_units: usize,
    pub system_text: String,
    /// Label of the generator the owner of the session drives it with.
    pub generator: String,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            window_units: DEFAULT_WINDOW_UNITS,
            reserve_units: DEFAULT_RESERVE_UNITS,
            system_text: DEFAULT_SYSTEM_PROMPT.to_string(),
            generator: "stub".to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOverrides {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub window_units: Option<usize>,
    #[serde(default)]
    pub reserve_units: Option<usize>,
    #[serde(default)]
    pub system_text: Option<String>,
    #[serde(default)]
    pub generator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub assistant: String,
    pub hit_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    history: Vec<Turn>,
    pub config: SessionConfig,
}

impl ChatSession {
    pub fn history(&self) -> &[Turn] {
        &self.history
    }
}

pub fn new_session(overrides: SessionOverrides) -> Result<ChatSession, PipelineError> {
    new_session_from(SessionConfig::default(), overrides)
}

/// Applies overrides on top of `base`, then checks bounds.
pub fn new_session_from(
    base: SessionConfig,
    overrides: SessionOverrides,
) -> Result<ChatSession, PipelineError> {
    let config = SessionConfig {
        k: overrides.k.unwrap_or(base.k),
        window_units: overrides.window_units.unwrap_or(base.window_units),
        reserve_units: overrides.reserve_units.unwrap_or(base.reserve_units),
        system_text: overrides.system_text.unwrap_or(base.system_text),
        generator: overrides.generator.unwrap_or(base.generator),
    };
    if config.k == 0 {
        return Err(PipelineError::InvalidConfig("k must be at least 1".into()));
    }
    if config.window_units < MIN_WINDOW_UNITS {
        return Err(PipelineError::InvalidConfig(format!(
            "window_units must be at least {MIN_WINDOW_UNITS}"
        )));
    }
    if config.reserve_units == 0 || config.reserve_units >= config.window_units {
        return Err(PipelineError::InvalidConfig(
            "reserve_units must be positive and below window_units".into(),
        ));
    }
    Ok(ChatSession {
        session_id: uuid::Uuid::new_v4().to_string(),
        history: Vec::new(),
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagAnswer {
    pub reply: String,
    /// The search hits, in rank order.
    pub sources: Vec<SearchHit>,
    pub included_chunk_count: usize,
    /// Set when the index held nothing at query time.
    pub no_context_flag: bool,
    pub prompt_token_estimate: usize,
    pub usage: Option<Usage>,
}

/// Embeds the query, retrieves the top-k chunks, assembles the prompt, generates,
/// and appends the turn to the session history. History is untouched on error.
pub fn answer(
    query: &str,
    session: &mut ChatSession,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    generator: &dyn Generator,
    params: &GenerationParams,
) -> Result<RagAnswer, PipelineError> {
    if query.trim().is_empty() {
        return Err(PipelineError::EmptyQuery);
    }
    let query_embedding = embedder.embed(query)?;
    let hits = index.search(&query_embedding, session.config.k)?;
    let bundle = PromptBundle {
        system_text: session.config.system_text.clone(),
        context_chunks: hits
            .iter()
            .map(|h| ContextChunk {
                text: h.entry.text.clone(),
                score: h.score,
            })
            .collect(),
        user_query: query.to_string(),
        window_units: session.config.window_units,
        reserve_units: session.config.reserve_units,
    };
    let prompt = assemble_prompt(&bundle)?;
    let generation = generator.generate(&prompt, params)?;

    session.history.push(Turn {
        user: query.to_string(),
        assistant: generation.text.clone(),
        hit_ids: hits.iter().map(|h| h.entry.id.clone()).collect(),
    });
    Ok(RagAnswer {
        reply: generation.text,
        no_context_flag: index.is_empty(),
        included_chunk_count: prompt.included_chunk_count,
        prompt_token_estimate: prompt.token_estimate,
        sources: hits,
        usage: generation.usage,
    })
}

/// Answers one query in a fresh session built from `base`.
pub fn answer_once(
    query: &str,
    base: &SessionConfig,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    generator: &dyn Generator,
    params: &GenerationParams,
) -> Result<RagAnswer, PipelineError> {
    let mut session = new_session_from(base.clone(), SessionOverrides::default())?;
    answer(query, &mut session, index, embedder, generator, params)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    pub inserted: usize,
    pub duplicates: usize,
}

/// Chunks and embeds every document without touching an index.
pub fn build_entries(
    documents: &[KnowledgeDocument],
    chunking: &ChunkConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<IndexEntry>, PipelineError> {
    let mut chunks = Vec::new();
    for doc in documents {
        chunks.extend(split_document(&doc.id, &doc.text, chunking)?);
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let embeddings = embedder.embed_batch(&texts)?;
    if embeddings.len() != chunks.len() {
        return Err(EmbedError::Invalid(format!(
            "{} chunks but {} embeddings",
            chunks.len(),
            embeddings.len()
        ))
        .into());
    }
    Ok(chunks
        .into_iter()
        .zip(embeddings)
        .map(|(chunk, embedding)| {
            let meta = EntryMeta {
                source_doc: chunk.source_doc,
                char_span: chunk.char_span,
                speaker: None,
            };
            IndexEntry::new(chunk.text, embedding, meta)
        })
        .collect())
}

/// Chunks, embeds and indexes the documents. Nothing is added unless every
/// chunk of every document is accepted.
pub fn ingest_documents(
    index: &mut VectorIndex,
    documents: &[KnowledgeDocument],
    chunking: &ChunkConfig,
    embedder: &dyn Embedder,
) -> Result<IngestReport, PipelineError> {
    let entries = build_entries(documents, chunking, embedder)?;
    let chunks = entries.len();
    let (inserted, duplicates) = index.add_all(entries)?;
    Ok(IngestReport {
        documents: documents.len(),
        chunks,
        inserted,
        duplicates,
    })
}

/// Reads a system prompt file, trimming surrounding whitespace.
pub fn load_system_prompt(path: &Path) -> std::io::Result<String> {
    Ok(std::fs::read_to_string(path)?.trim().to_string())
}
