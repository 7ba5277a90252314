//! HTTP API over the retrieval and evaluation engine.
//!
//! Routes live under `/v1` plus a `/healthz` probe; errors are `{code, message}`.

mod api;
mod config;
mod state;

use std::future::Future;
use std::sync::Arc;

pub use api::{
    router, ApiError, ChatResponse, DocumentResponse, SearchResponse, SessionResponse, SourceView,
};
pub use config::{EmbedderChoice, GeneratorChoice, ServiceConfig};
pub use state::AppState;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("cannot load index: {0}")]
    IndexLoad(String),
    #[error("cannot persist index: {0}")]
    Persist(String),
    #[error("server error: {0}")]
    Server(String),
}

/// Serves on `listener` until `shutdown` resolves, then persists the index.
pub async fn run_until<F>(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: F,
) -> Result<(), ServiceError>
where
    F: Future<Output = ()> + Send + 'static,
{
    let app = router(state.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Server(e.to_string()))?;
    persist(&state)
}

pub fn persist(state: &AppState) -> Result<(), ServiceError> {
    let idx = state.index.read().expect("index lock poisoned");
    let manifest = idx
        .persist(&state.config.index_dir)
        .map_err(|e| ServiceError::Persist(e.to_string()))?;
    tracing::info!(entries = manifest.entry_count, dir = %state.config.index_dir.display(), "index persisted");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Loads state from `config`, binds, and runs until SIGINT or SIGTERM.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = config.bind.clone();
    let state = Arc::new(AppState::from_config(config)?);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::Bind {
            addr: addr.clone(),
            message: e.to_string(),
        })?;
    tracing::info!(%addr, "listening");
    run_until(listener, state, shutdown_signal()).await
}
