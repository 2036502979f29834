//! `/v1` HTTP API over [`EditService`].
//!
//! | method | path                                         | body                          |
//! |--------|----------------------------------------------|-------------------------------|
//! | POST   | /v1/sessions                                 | PNG bytes                     |
//! | GET    | /v1/sessions/{id}/canvas.png                 |                               |
//! | POST   | /v1/sessions/{id}/proposals                  | `{"instruction"}`             |
//! | GET    | /v1/sessions/{id}/proposals                  |                               |
//! | GET    | /v1/sessions/{id}/proposals/{n}/mask.png     |                               |
//! | POST   | /v1/sessions/{id}/proposals/{n}/resolve      | `{"decision", "mask_b64"?, "inpaint_prompt"?, "feedback"?}` |
//! | GET    | /v1/sessions/{id}/trace                      |                               |
//! | GET    | /v1/health                                   |                               |
//!
//! Errors are `{"error": {"code", "message"}}`. With a token configured,
//! every route except health needs `Authorization: Bearer <token>`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use cotcanvas::pipeline::{Decision, Overrides};

use crate::service::{mask_from_field, EditService, ServiceError, ServiceResult};

pub const MAX_UPLOAD: usize = 64 * 1024 * 1024;

#[derive(Clone)]
pub struct ApiState {
    pub service: Arc<EditService>,
    pub token: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposeRequest {
    instruction: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResolveRequest {
    decision: Decision,
    #[serde(default)]
    mask_b64: Option<String>,
    #[serde(default)]
    inpaint_prompt: Option<String>,
    #[serde(default)]
    feedback: Option<String>,
}

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        let body = json!({ "error": { "code": self.0.code(), "message": self.0.to_string() } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ServiceResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

/// Run a blocking service call off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ServiceResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
        .map_err(ApiError)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn create_session(State(st): State<ApiState>, body: Bytes) -> ApiResult<Response> {
    let id = blocking(move || st.service.create_session(&body)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn canvas(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(move || st.service.canvas_png(&id)).await?))
}

async fn propose(State(st): State<ApiState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let list = blocking(move || {
        let req: ProposeRequest = parse_json(&body)?;
        st.service.propose(&id, &req.instruction)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(list)).into_response())
}

async fn proposals(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || st.service.proposals(&id)).await?).into_response())
}

async fn mask(State(st): State<ApiState>, Path((id, n)): Path<(String, usize)>) -> ApiResult<Response> {
    Ok(png(blocking(move || st.service.mask_png(&id, n)).await?))
}

async fn resolve(State(st): State<ApiState>, Path((id, n)): Path<(String, usize)>, body: Bytes) -> ApiResult<Response> {
    let view = blocking(move || {
        let req: ResolveRequest = parse_json(&body)?;
        let overrides = Overrides {
            mask: req.mask_b64.as_deref().map(mask_from_field).transpose()?,
            inpaint_prompt: req.inpaint_prompt,
            feedback: req.feedback,
        };
        st.service.resolve(&id, n, req.decision, overrides)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn trace(State(st): State<ApiState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || st.service.trace(&id)).await?).into_response())
}

async fn health(State(st): State<ApiState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": st.service.session_count() }))
}

async fn require_token(State(st): State<ApiState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let body = json!({ "error": { "code": "unauthorized", "message": "missing or wrong bearer token" } });
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

async fn fallback() -> ApiError {
    ApiError(ServiceError::NotFound("no such route".into()))
}

pub fn router(state: ApiState) -> Router {
    let guarded = Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/canvas.png", get(canvas))
        .route("/v1/sessions/{id}/proposals", post(propose).get(proposals))
        .route("/v1/sessions/{id}/proposals/{n}/mask.png", get(mask))
        .route("/v1/sessions/{id}/proposals/{n}/resolve", post(resolve))
        .route("/v1/sessions/{id}/trace", get(trace))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(health))
        .merge(guarded)
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}
