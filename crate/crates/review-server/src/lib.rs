//! HTTP service for reviewing drafted region rationales.
//!
//! Routes (all behind the shared token):
//!
//! - `GET  /api/session/{id}/next` serves the open task, or opens the next one
//! - `POST /api/session/{id}/decision` records a verdict for the open task
//! - `GET  /api/session/{id}/export` returns recorded decisions as JSONL
//! - `GET  /images/...` serves crops from the data directory
//!
//! The token is accepted as `Authorization: Bearer ...` or `?token=...`, the
//! latter so that `<img>` tags can load crops.

pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pathcot::clock::{Clock, SystemClock};
use pathcot::review::{DecisionRequest, ReviewError};
use serde_json::json;
use tower_http::services::ServeDir;

pub use store::{SessionManifest, SessionStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    store: Arc<SessionStore>,
    clock: Arc<dyn Clock>,
    token: Arc<str>,
}

impl AppState {
    pub fn new(store: SessionStore, token: impl Into<String>) -> Self {
        Self::with_clock(store, token, Arc::new(SystemClock))
    }

    pub fn with_clock(store: SessionStore, token: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        Self { store: Arc::new(store), clock, token: Arc::from(token.into()) }
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) | StoreError::InvalidId(_) => {
                Self::new(StatusCode::NOT_FOUND, "session_not_found", e.to_string())
            }
            StoreError::Review(r) => r.into(),
            StoreError::Io { .. } | StoreError::Parse { .. } => {
                tracing::error!(error = %e, "review store failure");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string())
            }
        }
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, code) = match e {
            ReviewError::NoPendingTasks => (StatusCode::NOT_FOUND, "no_pending_tasks"),
            ReviewError::StaleTask(_) => (StatusCode::CONFLICT, "stale_task"),
            ReviewError::InvalidIndices(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_indices"),
            ReviewError::CorruptLog(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_log"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let images = ServeDir::new(state.store.images_dir());
    Router::new()
        .route("/api/session/{id}/next", get(next_task))
        .route("/api/session/{id}/decision", post(submit_decision))
        .route("/api/session/{id}/export", get(export))
        .nest_service("/images", images)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, data = %state.store.root().display(), "review service listening");
    axum::serve(listener, router(state)).await
}

fn presented_token<'a>(headers: &'a HeaderMap, query: Option<&'a str>) -> Option<&'a str> {
    if let Some(v) = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        return v.strip_prefix("Bearer ").map(str::trim);
    }
    query?.split('&').find_map(|kv| kv.strip_prefix("token="))
}

/// Compares without an early exit on the first differing byte.
fn token_matches(expected: &str, given: &str) -> bool {
    let (a, b) = (expected.as_bytes(), given.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    match presented_token(req.headers(), req.uri().query()) {
        Some(t) if token_matches(&state.token, t) => next.run(req).await,
        _ => ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong token").into_response(),
    }
}

async fn next_task(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.store.get(&id)?;
    let mut stored = handle.lock().expect("session lock poisoned");
    let task = stored.session.next_task(state.clock.now_ms())?;
    stored.persist()?;
    Ok(Json(task).into_response())
}

async fn submit_decision(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let handle = state.store.get(&id)?;
    let mut stored = handle.lock().expect("session lock poisoned");
    let recorded = stored.session.submit_decision(&req, state.clock.now_ms())?;
    stored.persist()?;
    tracing::info!(session = %id, roi = recorded.roi_index, verdict = ?recorded.decision.verdict, "decision recorded");
    Ok(Json(recorded).into_response())
}

async fn export(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = state.store.get(&id)?;
    let stored = handle.lock().expect("session lock poisoned");
    let mut body = String::new();
    for d in stored.session.decisions() {
        body.push_str(&serde_json::to_string(d).expect("decisions serialize"));
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
