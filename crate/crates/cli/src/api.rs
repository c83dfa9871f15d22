//! HTTP surface: detection ingestion, session control and the read-only
//! analytics views polled by the dashboard.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use classwatch_core::analytics::{self, AnalyticsError, DEFAULT_BUCKET_MS};
use classwatch_core::gateway::{Ack, Gateway, GatewayError, PROTOCOL_VERSION};
use classwatch_core::matcher::{Embedding, MatchError};
use classwatch_core::now_ms;
use classwatch_core::session::{EngineError, SessionEngine};

#[derive(Clone)]
pub struct AppState {
    pub gateway: Arc<Gateway>,
}

impl AppState {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway }
    }

    fn engine(&self) -> &SessionEngine {
        self.gateway.engine()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::UnknownSession(_) | EngineError::UnknownStudent(_) => StatusCode::NOT_FOUND,
            EngineError::AlreadyEnded(_) | EngineError::SessionNotActive(_) => StatusCode::CONFLICT,
            EngineError::Match(MatchError::DuplicateStudentId(_)) => StatusCode::CONFLICT,
            EngineError::Match(_) | EngineError::BeforeSessionStart { .. } => StatusCode::BAD_REQUEST,
            EngineError::Classifier(_) | EngineError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        let (status, code) = match &e {
            AnalyticsError::UnknownSession(_) => (StatusCode::NOT_FOUND, "UnknownSession"),
            AnalyticsError::UnknownStudent(_) => (StatusCode::NOT_FOUND, "UnknownStudent"),
            AnalyticsError::InvalidBucketWidth(_) => (StatusCode::BAD_REQUEST, "InvalidBucketWidth"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let (status, code) = match &e {
            GatewayError::BatchTooLarge { .. } => (StatusCode::PAYLOAD_TOO_LARGE, "BatchTooLarge"),
            GatewayError::MalformedPayload(_) => (StatusCode::BAD_REQUEST, "MalformedPayload"),
            GatewayError::EmptySourceId => (StatusCode::BAD_REQUEST, "EmptySourceId"),
            GatewayError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "InvalidConfig"),
            GatewayError::GatewayUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "GatewayUnavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the router. When `static_dir` is given, unmatched paths are served
/// from it (the dashboard bundle).
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/detections", post(submit_detections))
        .route("/v1/sources", get(list_sources).post(register_source))
        .route("/v1/students", get(list_students).post(enroll_student))
        .route("/v1/sessions", get(list_sessions).post(start_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/end", post(end_session))
        .route("/v1/sessions/{id}/attendance", get(attendance))
        .route("/v1/sessions/{id}/emotions/distribution", get(distribution))
        .route("/v1/sessions/{id}/emotions/timeseries", get(timeseries))
        .route("/v1/sessions/{id}/students/{sid}", get(student_profile))
        .route("/v1/sessions/{id}/summary", get(summary))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn config(State(state): State<AppState>) -> Json<serde_json::Value> {
    let cfg = state.gateway.config();
    Json(json!({
        "protocol_version": PROTOCOL_VERSION,
        "capture_interval_ms": cfg.capture_interval_ms,
        "max_batch": cfg.max_batch,
        "match_threshold": state.engine().matcher_config().threshold,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AckResponse {
    pub protocol_version: u32,
    pub acks: Vec<Ack>,
}

async fn submit_detections(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<AckResponse>> {
    let gateway = state.gateway.clone();
    let acks = tokio::task::spawn_blocking(move || gateway.submit_json(&body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(AckResponse {
        protocol_version: PROTOCOL_VERSION,
        acks,
    }))
}

#[derive(Debug, Deserialize)]
struct SourceRequest {
    source_id: String,
    #[serde(default)]
    room_label: String,
}

async fn register_source(State(state): State<AppState>, Json(req): Json<SourceRequest>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.gateway.register_source(&req.source_id, &req.room_label)?))
}

async fn list_sources(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.gateway.sources())
}

#[derive(Debug, Deserialize)]
pub struct EnrollRequest {
    pub student_id: String,
    pub display_name: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub enrolled_at: Option<i64>,
}

#[derive(Debug, Serialize)]
struct StudentSummary {
    student_id: String,
    display_name: String,
    enrolled_at: i64,
}

async fn enroll_student(State(state): State<AppState>, Json(req): Json<EnrollRequest>) -> ApiResult<impl IntoResponse> {
    let embedding = Embedding::new(req.embedding).map_err(EngineError::from)?;
    let profile = state.engine().enroll_student(
        &req.student_id,
        &req.display_name,
        embedding,
        req.enrolled_at.unwrap_or_else(now_ms),
    )?;
    Ok((
        StatusCode::CREATED,
        Json(StudentSummary {
            student_id: profile.student_id,
            display_name: profile.display_name,
            enrolled_at: profile.enrolled_at,
        }),
    ))
}

async fn list_students(State(state): State<AppState>) -> impl IntoResponse {
    let students: Vec<StudentSummary> = state
        .engine()
        .roster()
        .profiles()
        .into_iter()
        .map(|p| StudentSummary {
            student_id: p.student_id,
            display_name: p.display_name,
            enrolled_at: p.enrolled_at,
        })
        .collect();
    Json(students)
}

async fn list_sessions(State(state): State<AppState>) -> impl IntoResponse {
    Json(analytics::list_sessions(state.engine().store().as_ref()))
}

#[derive(Debug, Deserialize)]
pub struct StartRequest {
    pub course_label: String,
    #[serde(default)]
    pub started_at: Option<i64>,
}

async fn start_session(State(state): State<AppState>, Json(req): Json<StartRequest>) -> ApiResult<impl IntoResponse> {
    let session = state
        .engine()
        .start_session(&req.course_label, req.started_at.unwrap_or_else(now_ms))?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.engine().session(&id)?))
}

#[derive(Debug, Default, Deserialize)]
pub struct EndRequest {
    #[serde(default)]
    pub ended_at: Option<i64>,
}

async fn end_session(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: EndRequest = if body.is_empty() {
        EndRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "MalformedPayload", e.to_string()))?
    };
    Ok(Json(state.engine().end_session(&id, req.ended_at.unwrap_or_else(now_ms))?))
}

async fn attendance(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.engine().session_snapshot(&id)?))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    start: Option<i64>,
    end: Option<i64>,
}

async fn distribution(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RangeQuery>,
) -> ApiResult<impl IntoResponse> {
    let range = match (q.start, q.end) {
        (None, None) => None,
        (start, end) => Some((start.unwrap_or(i64::MIN), end.unwrap_or(i64::MAX))),
    };
    Ok(Json(analytics::emotion_distribution(state.engine().store().as_ref(), &id, range)?))
}

#[derive(Debug, Deserialize)]
struct BucketQuery {
    bucket_ms: Option<i64>,
}

async fn timeseries(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<BucketQuery>,
) -> ApiResult<impl IntoResponse> {
    let width = q.bucket_ms.unwrap_or(DEFAULT_BUCKET_MS);
    Ok(Json(analytics::engagement_timeseries(state.engine().store().as_ref(), &id, width)?))
}

async fn student_profile(
    State(state): State<AppState>,
    Path((id, sid)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(analytics::student_profile(state.engine().store().as_ref(), &id, &sid)?))
}

async fn summary(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(analytics::session_summary(state.engine(), &id)?))
}
