use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medrag_core::corpus::{
    parse_tagged_dialogue, to_knowledge_documents, Grouping, KnowledgeDocument,
};
use medrag_core::embed::EmbedError;
use medrag_core::genkit::GenError;
use medrag_core::harness::{load_dataset, run_eval, EvalItem, MetricConfig, MetricReport};
use medrag_core::index::SearchHit;
use medrag_core::metrics::{BleuConfig, RougeVariant, Smoothing};
use medrag_core::pipeline::{
    answer, answer_once, build_entries, new_session_from, PipelineError, SessionOverrides,
    DISCLAIMER,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::state::AppState;

const EXCERPT_CHARS: usize = 200;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "code": self.code, "message": self.message }));
        (self.status, body).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            return Self::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "payload_too_large",
                r.body_text(),
            );
        }
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_query", r.body_text())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::EmptyQuery => Self::new(StatusCode::BAD_REQUEST, "empty_query", msg),
            PipelineError::InvalidConfig(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_config", msg)
            }
            PipelineError::Chunk(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_config", msg),
            PipelineError::Generate(GenError::QueryTooLarge { .. }) => {
                Self::new(StatusCode::BAD_REQUEST, "query_too_large", msg)
            }
            PipelineError::Embed(EmbedError::Remote(_))
            | PipelineError::Generate(GenError::Remote(_)) => {
                Self::new(StatusCode::BAD_GATEWAY, "upstream", msg)
            }
            _ => Self::internal(msg),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.body_limit_bytes;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/documents", post(documents))
        .route("/v1/search", get(search))
        .route("/v1/sessions", post(sessions))
        .route("/v1/chat", post(chat))
        .route("/v1/eval", post(eval))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let (size, dim) = {
        let idx = state.index.read().expect("index lock poisoned");
        (idx.len(), idx.dim())
    };
    Json(json!({
        "status": "ok",
        "index_size": size,
        "dim": dim,
        "providers": {
            "embedder": state.embedder.provider_tag(),
            "generator": state.base_session.generator,
            "generators": state
                .generators
                .iter()
                .map(|(label, g)| json!({ "label": label, "provider_tag": g.provider_tag() }))
                .collect::<Vec<_>>(),
        },
        "sessions": state.session_count(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRequest {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub tagged_dialogue: Option<String>,
    pub source: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DocumentResponse {
    pub documents: usize,
    pub chunks_indexed: usize,
    pub duplicates: usize,
}

async fn documents(
    State(state): State<Arc<AppState>>,
    body: Result<Json<DocumentRequest>, JsonRejection>,
) -> ApiResult<DocumentResponse> {
    let Json(req) = body?;
    let source = req.source.trim().to_string();
    if source.is_empty() {
        return Err(ApiError::bad_request("source must be non-empty"));
    }
    let docs = match (req.text, req.tagged_dialogue) {
        (Some(text), None) => {
            if text.trim().is_empty() {
                return Err(ApiError::bad_request("text must be non-empty"));
            }
            vec![KnowledgeDocument {
                id: source.clone(),
                source,
                seq_range: (0, 0),
                text,
            }]
        }
        (None, Some(tagged)) => {
            let exchanges = parse_tagged_dialogue(&tagged, &source).map_err(|e| {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_dialogue", e.to_string())
            })?;
            to_knowledge_documents(&exchanges, Grouping::PerExchange).map_err(|e| {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_dialogue", e.to_string())
            })?
        }
        _ => {
            return Err(ApiError::bad_request(
                "give exactly one of `text` or `tagged_dialogue`",
            ))
        }
    };
    let response = blocking(move || {
        let entries = build_entries(&docs, &state.chunking, state.embedder.as_ref())?;
        let chunks = entries.len();
        let mut idx = state.index.write().expect("index lock poisoned");
        let (inserted, duplicates) = idx.add_all(entries).map_err(PipelineError::from)?;
        debug_assert_eq!(inserted + duplicates, chunks);
        Ok(DocumentResponse {
            documents: docs.len(),
            chunks_indexed: inserted,
            duplicates,
        })
    })
    .await?;
    tracing::info!(
        chunks = response.chunks_indexed,
        duplicates = response.duplicates,
        "documents ingested"
    );
    Ok(Json(response))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceView {
    pub id: String,
    pub score: f64,
    pub rank: usize,
    pub source: String,
    pub char_span: (usize, usize),
    pub excerpt: String,
    pub text: String,
}

fn excerpt(text: &str) -> String {
    match text.char_indices().nth(EXCERPT_CHARS) {
        Some((i, _)) => format!("{}...", &text[..i]),
        None => text.to_string(),
    }
}

impl From<&SearchHit> for SourceView {
    fn from(h: &SearchHit) -> Self {
        Self {
            id: h.entry.id.clone(),
            score: h.score,
            rank: h.rank,
            source: h.entry.meta.source_doc.clone(),
            char_span: h.entry.meta.char_span,
            excerpt: excerpt(&h.entry.text),
            text: h.entry.text.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct SearchParams {
    pub q: String,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<SourceView>,
}

async fn search(
    State(state): State<Arc<AppState>>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> ApiResult<SearchResponse> {
    let Query(params) = params?;
    if params.q.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_query",
            "q must be non-empty",
        ));
    }
    let k = params.k.unwrap_or(state.config.k);
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let hits = blocking(move || {
        let query = state
            .embedder
            .embed(&params.q)
            .map_err(PipelineError::from)?;
        let idx = state.index.read().expect("index lock poisoned");
        Ok(idx.search(&query, k).map_err(PipelineError::from)?)
    })
    .await?;
    Ok(Json(SearchResponse {
        hits: hits.iter().map(SourceView::from).collect(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub config: medrag_core::pipeline::SessionConfig,
}

async fn sessions(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SessionOverrides>, JsonRejection>,
) -> ApiResult<SessionResponse> {
    let Json(overrides) = body?;
    let session = new_session_from(state.base_session.clone(), overrides)?;
    if !state.generators.contains_key(&session.config.generator) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_config",
            format!(
                "generator {:?} is not available; choose one of {:?}",
                session.config.generator,
                state.generators.keys().collect::<Vec<_>>()
            ),
        ));
    }
    let response = SessionResponse {
        session_id: session.session_id.clone(),
        config: session.config.clone(),
    };
    state.insert_session(session);
    Ok(Json(response))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub session_id: String,
    pub query: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub reply: String,
    pub sources: Vec<SourceView>,
    pub included_chunk_count: usize,
    pub no_context_flag: bool,
    pub prompt_token_estimate: usize,
    pub disclaimer: String,
}

async fn chat(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> ApiResult<ChatResponse> {
    let Json(req) = body?;
    let handle = state.session(&req.session_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "session_not_found",
            "unknown or expired session",
        )
    })?;
    // held for the whole turn so one session's turns never interleave
    let mut slot = handle.lock_owned().await;
    let result = blocking(move || {
        let generator = state
            .generators
            .get(&slot.session.config.generator)
            .cloned()
            .ok_or_else(|| ApiError::internal("session generator disappeared"))?;
        let idx = state.index.read().expect("index lock poisoned");
        let outcome = answer(
            &req.query,
            &mut slot.session,
            &idx,
            state.embedder.as_ref(),
            generator.as_ref(),
            &state.params,
        );
        slot.last_used = Instant::now();
        Ok(outcome?)
    })
    .await?;
    Ok(Json(ChatResponse {
        sources: result.sources.iter().map(SourceView::from).collect(),
        reply: result.reply,
        included_chunk_count: result.included_chunk_count,
        no_context_flag: result.no_context_flag,
        prompt_token_estimate: result.prompt_token_estimate,
        disclaimer: DISCLAIMER.to_string(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSystem {
    Echo,
    Rag,
    Fixed,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    #[serde(default)]
    pub items: Option<Vec<EvalItem>>,
    /// Path on the server's filesystem.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub system: EvalSystem,
    #[serde(default)]
    pub fixed_text: Option<String>,
    #[serde(default)]
    pub system_name: Option<String>,
    #[serde(default)]
    pub rouge: Option<RougeVariant>,
    #[serde(default)]
    pub bleu_smoothing: Option<Smoothing>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

async fn eval(
    State(state): State<Arc<AppState>>,
    body: Result<Json<EvalRequest>, JsonRejection>,
) -> ApiResult<MetricReport> {
    let Json(req) = body?;
    let report = blocking(move || {
        let items = match (req.items, &req.dataset) {
            (Some(items), None) => items,
            (None, Some(path)) => {
                load_dataset(path).map_err(|e| ApiError::bad_request(e.to_string()))?
            }
            _ => {
                return Err(ApiError::bad_request(
                    "give exactly one of `items` or `dataset`",
                ))
            }
        };
        let config = MetricConfig {
            rouge: req.rouge.unwrap_or_default(),
            bleu: BleuConfig {
                smoothing: req.bleu_smoothing.unwrap_or(Smoothing::None),
                ..BleuConfig::default()
            },
            jobs: req.jobs.unwrap_or(state.config.eval_jobs).max(1),
            ..MetricConfig::default()
        };
        let name = req.system_name.unwrap_or_else(|| {
            match req.system {
                EvalSystem::Echo => "echo",
                EvalSystem::Rag => "rag",
                EvalSystem::Fixed => "fixed",
            }
            .to_string()
        });
        let report = match req.system {
            EvalSystem::Echo => run_eval(&name, &items, |it| Ok(it.reference.clone()), &config),
            EvalSystem::Fixed => {
                let text = req
                    .fixed_text
                    .ok_or_else(|| ApiError::bad_request("system `fixed` needs `fixed_text`"))?;
                run_eval(&name, &items, |_| Ok(text.clone()), &config)
            }
            EvalSystem::Rag => {
                let generator = state.generators[&state.base_session.generator].clone();
                let idx = state.index.read().expect("index lock poisoned");
                run_eval(
                    &name,
                    &items,
                    |it| {
                        answer_once(
                            &it.query,
                            &state.base_session,
                            &idx,
                            state.embedder.as_ref(),
                            generator.as_ref(),
                            &state.params,
                        )
                        .map(|a| a.reply)
                        .map_err(|e| e.to_string())
                    },
                    &config,
                )
            }
        };
        report.map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "eval_failed",
                e.to_string(),
            )
        })
    })
    .await?;
    Ok(Json(report))
}
