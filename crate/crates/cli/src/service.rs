//! HTTP service exposing one engine to external agents.
//!
//! Engine calls are synchronous (journal writes, optional remote embedding),
//! so handlers run them on the blocking pool.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memrl_core::engine::{EngineStats, RetrievalOverrides};
use memrl_core::learning::UtilityUpdate;
use memrl_core::{IntentInput, MemoryEngine, MemoryTriplet, MemrlError, OutcomeLabel};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<MemrlError> for ApiError {
    fn from(e: MemrlError) -> Self {
        let status = match &e {
            MemrlError::InvalidDimension { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            MemrlError::NotFound(_) => StatusCode::NOT_FOUND,
            MemrlError::InvalidArgument(_) | MemrlError::Config(_) | MemrlError::EmptyPool => {
                StatusCode::BAD_REQUEST
            }
            MemrlError::RemoteEmbedding(_) => StatusCode::BAD_GATEWAY,
            MemrlError::Persistence(_) | MemrlError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self { status, message: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertRequest {
    pub intent_text: Option<String>,
    pub embedding: Option<Vec<f64>>,
    pub experience: String,
    pub outcome_label: Option<OutcomeLabel>,
    pub q_init: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub intent_text: Option<String>,
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub overrides: RetrievalOverrides,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub ids: Vec<u64>,
    pub reward: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SelectedMemory {
    pub id: u64,
    pub similarity: f64,
    pub sim_z: f64,
    pub q_z: f64,
    pub score: f64,
    pub experience: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub selected: Vec<SelectedMemory>,
}

fn intent(text: Option<String>, embedding: Option<Vec<f64>>) -> ApiResult<IntentInput> {
    match (text, embedding) {
        (Some(t), None) => Ok(IntentInput::Text(t)),
        (None, Some(e)) => Ok(IntentInput::Embedding(e)),
        _ => Err(ApiError::bad_request("exactly one of intent_text and embedding is required")),
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, MemrlError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => {
            tracing::error!(error = %e, "handler task failed");
            Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: "internal error".into(),
            })
        }
    }
}

async fn insert(
    State(engine): State<Arc<MemoryEngine>>,
    body: Result<Json<InsertRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Json(req) = body?;
    let input = intent(req.intent_text, req.embedding)?;
    let label = req.outcome_label.unwrap_or(OutcomeLabel::Unlabeled);
    let id = blocking(move || engine.insert(&input, &req.experience, label, req.q_init)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn retrieve(
    State(engine): State<Arc<MemoryEngine>>,
    body: Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<Json<RetrieveResponse>> {
    let Json(req) = body?;
    let input = intent(req.intent_text, req.embedding)?;
    let selected = blocking(move || {
        let ctx = engine.retrieve(&input, &req.overrides)?;
        // experiences never change after insertion, so a separate lookup is safe
        ctx.selected
            .iter()
            .map(|c| {
                let t = engine.get(c.triplet_id).ok_or(MemrlError::NotFound(c.triplet_id))?;
                Ok(SelectedMemory {
                    id: c.triplet_id,
                    similarity: c.similarity,
                    sim_z: c.sim_z,
                    q_z: c.q_z,
                    score: c.score,
                    experience: t.experience,
                })
            })
            .collect::<Result<Vec<_>, MemrlError>>()
    })
    .await?;
    Ok(Json(RetrieveResponse { selected }))
}

async fn feedback(
    State(engine): State<Arc<MemoryEngine>>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Json(req) = body?;
    let updates: Vec<UtilityUpdate> = blocking(move || engine.feedback(&req.ids, req.reward)).await?;
    Ok(Json(json!({ "updates": updates })))
}

async fn get_memory(
    State(engine): State<Arc<MemoryEngine>>,
    id: Result<Path<u64>, PathRejection>,
) -> ApiResult<Json<MemoryTriplet>> {
    let Path(id) = id?;
    engine.get(id).map(Json).ok_or_else(|| MemrlError::NotFound(id).into())
}

async fn metrics(State(engine): State<Arc<MemoryEngine>>) -> ApiResult<Json<EngineStats>> {
    Ok(Json(engine.stats()?))
}

pub fn router(engine: Arc<MemoryEngine>) -> Router {
    Router::new()
        .route("/memories", post(insert))
        .route("/memories/{id}", get(get_memory))
        .route("/retrieve", post(retrieve))
        .route("/feedback", post(feedback))
        .route("/metrics", get(metrics))
        .with_state(engine)
}

/// Serves until `shutdown` resolves, then flushes the journal.
pub async fn serve(
    engine: Arc<MemoryEngine>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    axum::serve(listener, router(engine.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    engine.flush()?;
    tracing::info!(bank_size = engine.len(), "shut down; journal flushed");
    Ok(())
}

/// Resolves on Ctrl-C, or SIGTERM on Unix.
pub async fn shutdown_signal() {
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
        _ = ctrl_c => {}
        _ = term => {}
    }
}
