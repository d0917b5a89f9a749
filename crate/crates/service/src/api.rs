//! HTTP routes over a [`SessionStore`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memir_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::ApiRoundResult;
use crate::placeholder::{media_type, placeholder_svg};
use crate::store::{SessionSnapshot, SessionStore, StoreError};

pub struct AppState {
    pub store: SessionStore,
    /// Base for relative `image_path` entries.
    pub image_root: PathBuf,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Busy(_) => StatusCode::CONFLICT,
            StoreError::Engine(Error::Data(_) | Error::Lookup(_)) => StatusCode::NOT_FOUND,
            StoreError::Engine(Error::InvalidArgument(_) | Error::Config(_)) => StatusCode::BAD_REQUEST,
            StoreError::Engine(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub caption: String,
    #[serde(default)]
    pub target_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub result: ApiRoundResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundResponse {
    pub result: ApiRoundResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: String,
    pub corpus_size: usize,
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn require_text(s: &str, what: &str) -> Result<(), ApiError> {
    if s.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("{what} must not be empty")));
    }
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<CreateResponse> {
    let Json(req) = body?;
    require_text(&req.caption, "caption")?;
    let (session_id, result) =
        blocking(move || app.store.create(&req.caption, req.target_id.as_deref())).await??;
    Ok(Json(CreateResponse { session_id, result }))
}

async fn post_round(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<RoundRequest>, JsonRejection>,
) -> ApiResult<RoundResponse> {
    let Json(req) = body?;
    require_text(&req.text, "text")?;
    let mut guard = app.store.acquire(&id).await?;
    let result = blocking(move || app.store.advance(&mut guard, &req.text)).await??;
    Ok(Json(RoundResponse { result }))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionSnapshot> {
    let guard = app.store.acquire(&id).await?;
    Ok(Json(app.store.snapshot(&guard)?))
}

async fn get_image(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let corpus = &app.store.engine().corpus;
    let i = corpus
        .position(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {id}")))?;
    match corpus.image_path(i) {
        Some(p) => {
            let path = app.image_root.join(p);
            let bytes = tokio::fs::read(&path).await.map_err(|e| {
                ApiError::new(StatusCode::NOT_FOUND, format!("image file {}: {e}", path.display()))
            })?;
            Ok(([(header::CONTENT_TYPE, media_type(p))], bytes).into_response())
        }
        None => {
            let svg = placeholder_svg(&id, corpus.label(i));
            Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
        }
    }
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    let e = app.store.engine();
    Json(Health {
        status: "ok".into(),
        checkpoint_id: e.checkpoint_id.clone(),
        corpus_size: e.corpus.len(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/rounds", post(post_round))
        .route("/images/{id}", get(get_image))
        .route("/health", get(health))
        .with_state(state)
}
