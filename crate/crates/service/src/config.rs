use std::path::{Path, PathBuf};

use medrag_core::genkit::StubMode;
use medrag_core::{
    DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_UNITS, DEFAULT_EMBED_DIM, DEFAULT_RESERVE_UNITS,
    DEFAULT_TOP_K, DEFAULT_WINDOW_UNITS,
};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderChoice {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorChoice {
    Stub,
    Remote,
}

impl GeneratorChoice {
    pub fn label(&self) -> &'static str {
        match self {
            GeneratorChoice::Stub => "stub",
            GeneratorChoice::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub index_dir: PathBuf,
    pub embedder: EmbedderChoice,
    pub embed_dim: usize,
    pub generator: GeneratorChoice,
    pub stub_mode: StubMode,
    pub k: usize,
    pub window_units: usize,
    pub reserve_units: usize,
    pub chunk_units: usize,
    pub chunk_overlap: usize,
    pub system_prompt_path: Option<PathBuf>,
    pub body_limit_bytes: usize,
    pub session_ttl_secs: u64,
    pub eval_jobs: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            index_dir: PathBuf::from("medrag-index"),
            embedder: EmbedderChoice::Local,
            embed_dim: DEFAULT_EMBED_DIM,
            generator: GeneratorChoice::Stub,
            stub_mode: StubMode::extract_with_default_fallback(),
            k: DEFAULT_TOP_K,
            window_units: DEFAULT_WINDOW_UNITS,
            reserve_units: DEFAULT_RESERVE_UNITS,
            chunk_units: DEFAULT_CHUNK_UNITS,
            chunk_overlap: DEFAULT_CHUNK_OVERLAP,
            system_prompt_path: None,
            body_limit_bytes: 2 * 1024 * 1024,
            session_ttl_secs: 30 * 60,
            eval_jobs: 1,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        let config: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let fail = |m: &str| Err(ServiceError::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.body_limit_bytes == 0 {
            return fail("body_limit_bytes must be positive");
        }
        if self.session_ttl_secs == 0 {
            return fail("session_ttl_secs must be positive");
        }
        if self.eval_jobs == 0 {
            return fail("eval_jobs must be at least 1");
        }
        if self.index_dir.exists() && !self.index_dir.is_dir() {
            return fail("index_dir exists and is not a directory");
        }
        Ok(())
    }
}
