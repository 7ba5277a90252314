use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use medrag_core::chunker::ChunkConfig;
use medrag_core::embed::{Embedder, LocalEmbedder, RemoteEmbedder};
use medrag_core::genkit::{GenerationParams, Generator, RemoteChat, StubGenerator};
use medrag_core::index::{SharedIndex, VectorIndex, MANIFEST_FILE};
use medrag_core::pipeline::{
    load_system_prompt, ChatSession, SessionConfig, DEFAULT_SYSTEM_PROMPT,
};

use crate::config::{EmbedderChoice, GeneratorChoice, ServiceConfig};
use crate::ServiceError;

pub(crate) struct SessionSlot {
    pub session: ChatSession,
    pub last_used: Instant,
}

pub type SessionHandle = Arc<tokio::sync::Mutex<SessionSlot>>;

/// Everything the handlers share.
pub struct AppState {
    pub index: SharedIndex,
    pub embedder: Arc<dyn Embedder>,
    /// Keyed by the label sessions select with (`stub`, `remote`).
    pub generators: BTreeMap<String, Arc<dyn Generator>>,
    pub base_session: SessionConfig,
    pub chunking: ChunkConfig,
    pub params: GenerationParams,
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl AppState {
    /// Loads the index from `config.index_dir` (or starts empty) and builds the
    /// configured providers. Remote providers read their settings from the environment.
    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let index = if config.index_dir.join(MANIFEST_FILE).is_file() {
            VectorIndex::load(&config.index_dir)
                .map_err(|e| ServiceError::IndexLoad(e.to_string()))?
        } else {
            std::fs::create_dir_all(&config.index_dir).map_err(|e| {
                ServiceError::IndexLoad(format!("{}: {e}", config.index_dir.display()))
            })?;
            VectorIndex::new()
        };
        let embedder: Arc<dyn Embedder> = match config.embedder {
            EmbedderChoice::Local => Arc::new(
                LocalEmbedder::new(config.embed_dim)
                    .map_err(|e| ServiceError::Config(e.to_string()))?,
            ),
            EmbedderChoice::Remote => Arc::new(
                RemoteEmbedder::from_env().map_err(|e| ServiceError::Config(e.to_string()))?,
            ),
        };
        let mut generators: BTreeMap<String, Arc<dyn Generator>> = BTreeMap::new();
        generators.insert(
            "stub".into(),
            Arc::new(StubGenerator::new(config.stub_mode.clone())),
        );
        match RemoteChat::from_env() {
            Ok(remote) => {
                generators.insert("remote".into(), Arc::new(remote));
            }
            Err(e) if config.generator == GeneratorChoice::Remote => {
                return Err(ServiceError::Config(e.to_string()));
            }
            Err(_) => {}
        }
        Self::with_parts(index, embedder, generators, config)
    }

    pub fn with_parts(
        index: VectorIndex,
        embedder: Arc<dyn Embedder>,
        generators: BTreeMap<String, Arc<dyn Generator>>,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        if !generators.contains_key(config.generator.label()) {
            return Err(ServiceError::Config(format!(
                "generator {:?} is not available",
                config.generator.label()
            )));
        }
        let system_text = match &config.system_prompt_path {
            Some(p) => load_system_prompt(p)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?,
            None => DEFAULT_SYSTEM_PROMPT.to_string(),
        };
        let base_session = SessionConfig {
            k: config.k,
            window_units: config.window_units,
            reserve_units: config.reserve_units,
            system_text,
            generator: config.generator.label().to_string(),
        };
        medrag_core::pipeline::new_session_from(base_session.clone(), Default::default())
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let chunking = ChunkConfig::new(config.chunk_units, config.chunk_overlap)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        let params = GenerationParams {
            max_output_units: config.reserve_units,
            ..GenerationParams::default()
        };
        Ok(Self {
            index: index.into_shared(),
            embedder,
            generators,
            base_session,
            chunking,
            params,
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    fn ttl(&self) -> Duration {
        Duration::from_secs(self.config.session_ttl_secs)
    }

    pub(crate) fn insert_session(&self, session: ChatSession) {
        let mut map = self.sessions.lock().expect("session map poisoned");
        self.evict_expired(&mut map);
        let id = session.session_id.clone();
        let slot = SessionSlot {
            session,
            last_used: Instant::now(),
        };
        map.insert(id, Arc::new(tokio::sync::Mutex::new(slot)));
    }

    pub(crate) fn session(&self, id: &str) -> Option<SessionHandle> {
        let mut map = self.sessions.lock().expect("session map poisoned");
        self.evict_expired(&mut map);
        map.get(id).cloned()
    }

    /// Drops idle sessions. Sessions in use by a request are skipped.
    fn evict_expired(&self, map: &mut HashMap<String, SessionHandle>) {
        let ttl = self.ttl();
        map.retain(|_, slot| match slot.try_lock() {
            Ok(s) => s.last_used.elapsed() < ttl,
            Err(_) => true,
        });
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    /// Copy of a session's history, for inspection.
    pub async fn session_snapshot(&self, id: &str) -> Option<ChatSession> {
        let handle = self.session(id)?;
        let slot = handle.lock().await;
        Some(slot.session.clone())
    }
}
