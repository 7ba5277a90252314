//! Retrieval-augmented medical dialogue engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: tagged `<Patient>`/`<Doctor>` dialogue parsing, rendering and chat-format export
//! - [`chunker`]: recursive, budget-bounded text splitting with overlap
//! - [`embed`]: deterministic local embeddings, a remote embeddings client, cosine similarity
//! - [`index`]: exact top-k vector store with directory persistence
//! - [`genkit`]: prompt assembly under a token budget, chat templates, stub and remote generators
//! - [`pipeline`]: the retrieve-then-generate loop and chat sessions
//! - [`metrics`]: BLEU, ROUGE-N, ROUGE-L and an embedding-based BERTScore analogue
//! - [`harness`]: batch evaluation, report rendering and chart data
//! - [`adapters`]: desk-scale LoRA and rotary position embedding kernels
//! - [`transport`]: HTTP transport, retry policy and record/replay fixtures shared by remote providers

pub mod adapters;
pub mod chunker;
pub mod corpus;
pub mod embed;
pub mod genkit;
pub mod harness;
pub mod index;
pub mod metrics;
pub mod pipeline;
pub mod transport;

/// Retrieval depth used when nothing else is configured.
pub const DEFAULT_TOP_K: usize = 4;
/// Chunk budget in token units.
pub const DEFAULT_CHUNK_UNITS: usize = 1024;
/// Default chunk overlap in token units.
pub const DEFAULT_CHUNK_OVERLAP: usize = 128;
/// Generator context window in token units.
pub const DEFAULT_WINDOW_UNITS: usize = 4096;
/// Units held back from the window for the generated reply.
pub const DEFAULT_RESERVE_UNITS: usize = 512;
/// Dimension of the local hashing embedder.
pub const DEFAULT_EMBED_DIM: usize = 256;
