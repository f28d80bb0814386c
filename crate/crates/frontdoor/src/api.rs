//! HTTP API.
//!
//! Core calls are synchronous and may block on the LLM or tool server, so
//! every handler moves them onto the blocking pool.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dbcopilot::diag_agents::{DiagError, DiagnosisEngine};
use dbcopilot::kb_ingest::{IngestError, RawDocument, SplitConfig};
use dbcopilot::qa_pipeline::{QaError, QaPipeline};
use dbcopilot::retrieval::HybridRetriever;
use serde::de::DeserializeOwned;
use serde_json::json;
use thiserror::Error;

use crate::payload::{
    ascii_json, chunk_text, AskRequest, AskResponse, DiagnoseRequest, DiagnoseResponse, DocumentAdded, FeedbackRequest, Health,
    ParamsRequest, OK,
};
use crate::sessions::{SessionError, SessionStore};

pub const STREAM_CHUNK_BYTES: usize = 64;
pub const SWEEP_INTERVAL: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<QaError> for ApiError {
    fn from(e: QaError) -> Self {
        match e {
            QaError::BackendUnavailable(_) => Self::Unavailable(e.to_string()),
            QaError::UnknownAnswerId(_) => Self::NotFound(e.to_string()),
            QaError::Retrieval(_) | QaError::Io(_) => Self::Internal(e.to_string()),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Unknown(_) => Self::NotFound(e.to_string()),
            SessionError::NotAwaiting(_) => Self::Conflict(e.to_string()),
            SessionError::Diag(d) => d.into(),
        }
    }
}

impl From<DiagError> for ApiError {
    fn from(e: DiagError) -> Self {
        match e {
            DiagError::EmptyAlert => Self::BadRequest(e.to_string()),
            DiagError::NotAwaitingParams => Self::Conflict(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::DuplicateDocId(_) => Self::Conflict(e.to_string()),
            IngestError::Io(_) => Self::Internal(e.to_string()),
            _ => Self::BadRequest(e.to_string()),
        }
    }
}

/// Shared server state.
pub struct AppState {
    pipeline: RwLock<Arc<QaPipeline>>,
    pub engine: Arc<DiagnosisEngine>,
    pub sessions: Arc<SessionStore>,
    kb_path: Option<PathBuf>,
    split: SplitConfig,
    kb_write: tokio::sync::Mutex<()>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState").field("kb_path", &self.kb_path).field("sessions", &self.sessions.len()).finish()
    }
}

impl AppState {
    pub fn new(pipeline: QaPipeline, engine: DiagnosisEngine, sessions: SessionStore) -> Self {
        Self {
            pipeline: RwLock::new(Arc::new(pipeline)),
            engine: Arc::new(engine),
            sessions: Arc::new(sessions),
            kb_path: None,
            split: SplitConfig::default(),
            kb_write: tokio::sync::Mutex::new(()),
        }
    }

    /// Persist the KB manifest here after every document upload.
    pub fn with_kb_path(mut self, path: Option<PathBuf>) -> Self {
        self.kb_path = path;
        self
    }

    pub fn with_split(mut self, split: SplitConfig) -> Self {
        self.split = split;
        self
    }

    pub fn pipeline(&self) -> Arc<QaPipeline> {
        self.pipeline.read().unwrap_or_else(std::sync::PoisonError::into_inner).clone()
    }

    fn swap_pipeline(&self, next: QaPipeline) {
        *self.pipeline.write().unwrap_or_else(std::sync::PoisonError::into_inner) = Arc::new(next);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/ask", post(ask))
        .route("/api/feedback", post(feedback))
        .route("/api/diagnose", post(diagnose))
        .route("/api/diagnose/{session_id}", get(poll))
        .route("/api/session/{session_id}/params", post(params))
        .route("/api/kb/documents", post(add_document))
        .route("/api/health", get(health))
        .with_state(state)
}

/// Periodically drop idle sessions.
pub fn spawn_sweeper(sessions: Arc<SessionStore>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(SWEEP_INTERVAL);
        loop {
            tick.tick().await;
            let dropped = sessions.sweep(Instant::now());
            if dropped > 0 {
                tracing::info!(dropped, "expired idle sessions");
            }
        }
    })
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn wants_stream(query: Option<&str>) -> bool {
    query.unwrap_or_default().split('&').any(|kv| matches!(kv, "stream=1" | "stream=true"))
}

async fn ask(State(state): State<Arc<AppState>>, RawQuery(query): RawQuery, body: Bytes) -> Result<Response, ApiError> {
    let req: AskRequest = parse_body(&body)?;
    if req.question.trim().is_empty() {
        return Err(ApiError::BadRequest("question is empty".into()));
    }
    let pipeline = state.pipeline();
    let answer = blocking(move || Ok(pipeline.answer_question(&req.question)?)).await?;
    let resp = AskResponse::from(answer);
    if !wants_stream(query.as_deref()) {
        return Ok(Json(resp).into_response());
    }
    let header_of = |s: String| HeaderValue::from_str(&s).map_err(|e| ApiError::Internal(e.to_string()));
    let chunks: Vec<Result<String, Infallible>> = chunk_text(&resp.text, STREAM_CHUNK_BYTES).into_iter().map(Ok).collect();
    let mut response = Response::new(Body::from_stream(futures::stream::iter(chunks)));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("text/markdown; charset=utf-8"));
    headers.insert("x-answer-id", header_of(resp.answer_id.clone())?);
    headers.insert("x-refused", HeaderValue::from_static(if resp.refused { "true" } else { "false" }));
    headers.insert("x-sources", header_of(ascii_json(&resp.sources))?);
    Ok(response)
}

async fn feedback(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: FeedbackRequest = parse_body(&body)?;
    let pipeline = state.pipeline();
    blocking(move || Ok(pipeline.record_feedback(&req.answer_id, req.verdict, &req.note)?)).await?;
    Ok(Json(OK).into_response())
}

async fn diagnose(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: DiagnoseRequest = parse_body(&body)?;
    let engine = state.engine.clone();
    let run = blocking(move || Ok(engine.start(&req.alert)?)).await?;
    let session_id = state.sessions.insert(run);
    let (sessions, engine, id) = (state.sessions.clone(), state.engine.clone(), session_id.clone());
    tokio::task::spawn_blocking(move || {
        if let Err(e) = sessions.advance(&id, &engine) {
            tracing::warn!(session = %id, error = %e, "diagnosis failed");
        }
    });
    Ok(Json(DiagnoseResponse { session_id }).into_response())
}

async fn poll(State(state): State<Arc<AppState>>, Path(session_id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.sessions.view(&session_id)?).into_response())
}

async fn params(State(state): State<Arc<AppState>>, Path(session_id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: ParamsRequest = parse_body(&body)?;
    let (sessions, engine) = (state.sessions.clone(), state.engine.clone());
    let (tx, rx) = tokio::sync::oneshot::channel::<Result<(), ApiError>>();
    tokio::task::spawn_blocking(move || {
        let mut tx = Some(tx);
        let result = sessions.resume(&session_id, &engine, req.values, || {
            if let Some(tx) = tx.take() {
                let _ = tx.send(Ok(()));
            }
        });
        match (result, tx.take()) {
            // rejected before the values were taken
            (Err(e), Some(tx)) => {
                let _ = tx.send(Err(e.into()));
            }
            (Err(e), None) => tracing::warn!(session = %session_id, error = %e, "resumed diagnosis failed"),
            (Ok(()), _) => {}
        }
    });
    rx.await.map_err(|_| ApiError::Internal("resume worker vanished".into()))??;
    Ok(Json(OK).into_response())
}

async fn add_document(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let raw: RawDocument = parse_body(&body)?;
    let _guard = state.kb_write.lock().await;
    let current = state.pipeline();
    let (split, kb_path) = (state.split, state.kb_path.clone());
    let (next, added) = blocking(move || {
        let doc = raw.parse()?;
        let (kb, added) = current.retriever().kb().with_document(&doc, &split)?;
        if let Some(path) = &kb_path {
            kb.write_manifest(path)?;
        }
        Ok((current.with_retriever(Arc::new(HybridRetriever::new(Arc::new(kb)))), added))
    })
    .await?;
    state.swap_pipeline(next);
    Ok(Json(DocumentAdded { chunks_added: added }).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { ok: true, kb_chunks: state.pipeline().retriever().kb().len(), tools_registered: state.engine.registry.len() })
}
