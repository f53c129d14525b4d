//! HTTP routes. Every response, errors included, is wrapped in an envelope
//! carrying the engine version and the hash of the network it refers to.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use blackstart_core::bigload::MeasurementSample;
use blackstart_core::restoration::{BoundaryState, StepReport, SyncRecommendation};
use blackstart_core::VERSION;

use crate::config::EngineConfig;
use crate::session::{CreateSession, IngestSummary, Session, SessionError};
use crate::store::SnapshotStore;

type Shared = Arc<RwLock<Session>>;

pub struct AppState {
    pub config: EngineConfig,
    sessions: RwLock<HashMap<String, Shared>>,
    store: Option<SnapshotStore>,
}

impl AppState {
    pub fn new(config: EngineConfig, store: Option<SnapshotStore>) -> Self {
        Self { config, sessions: RwLock::new(HashMap::new()), store }
    }

    /// Adds sessions restored from snapshots.
    pub async fn adopt(&self, sessions: Vec<Session>) {
        let mut map = self.sessions.write().await;
        for s in sessions {
            map.insert(s.id.clone(), Arc::new(RwLock::new(s)));
        }
    }

    async fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    fn persist(&self, s: &Session) -> Result<(), ApiError> {
        match &self.store {
            Some(store) => store.save(s).map_err(|e| ApiError::internal(format!("snapshot write failed: {e}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub engine_version: String,
    pub network_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locus: Option<String>,
}

fn ok<T: Serialize>(hash: String, data: T) -> Response {
    Json(Envelope { engine_version: VERSION.into(), network_hash: Some(hash), data: Some(data), error: None }).into_response()
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
    hash: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), locus: None }, hash: None }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", m)
    }

    fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }

    fn with_hash(mut self, hash: String) -> Self {
        self.hash = Some(hash);
        self
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use blackstart_core::restoration::SyncError;
        let (status, code) = match &e {
            SessionError::Case(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_case"),
            SessionError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            SessionError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            SessionError::Sync(SyncError::NotFullyEnergized) => (StatusCode::CONFLICT, "not_fully_energized"),
            SessionError::Sync(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_sync_request"),
            SessionError::Restoration(_) => (StatusCode::UNPROCESSABLE_ENTITY, "restoration_error"),
            SessionError::PowerFlow(_) => (StatusCode::UNPROCESSABLE_ENTITY, "power_flow_error"),
        };
        let mut err = Self::new(status, code, e.to_string());
        err.body.locus = e.locus();
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let env: Envelope<()> =
            Envelope { engine_version: VERSION.into(), network_hash: self.hash, data: None, error: Some(self.body) };
        (self.status, Json(env)).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub island_id: String,
    pub cursor: u32,
    pub steps: u32,
}

fn summary(s: &Session) -> SessionSummary {
    SessionSummary { id: s.id.clone(), island_id: s.island_id.clone(), cursor: s.cursor, steps: s.steps() }
}

async fn create_session(State(app): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let cfg = app.config.clone();
    let session = blocking(move || Session::create(id, &req, &cfg)).await??;
    app.persist(&session)?;
    let hash = session.network_hash();
    let out = summary(&session);
    app.sessions.write().await.insert(session.id.clone(), Arc::new(RwLock::new(session)));
    Ok((StatusCode::CREATED, ok(hash, out)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NetworkView {
    pub cursor: u32,
    pub steps: u32,
    pub network: blackstart_core::netmodel::Network,
}

async fn get_network(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = app.session(&id).await?;
    let s = s.read().await;
    Ok(ok(s.network_hash(), NetworkView { cursor: s.cursor, steps: s.steps(), network: s.network.clone() }))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ValidateRequest {
    #[serde(default)]
    pub step: Option<u32>,
}

async fn validate(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<ValidateRequest>>,
) -> Result<Response, ApiError> {
    let step = body.and_then(|Json(b)| b.step);
    let shared = app.session(&id).await?;
    let job = shared.read().await.validation_job(step, &app.config)?;
    let hash = job.network_hash.clone();
    let (job, report) = blocking(move || {
        let r = job.run();
        (job, r)
    })
    .await?;
    let report: StepReport = report.map_err(|e| ApiError::from(e).with_hash(hash.clone()))?;
    if job.is_cursor {
        shared.write().await.record_validation(&job, &report);
    }
    Ok(ok(hash, report))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActuateRequest {
    /// Hash returned with the validation being acted on.
    pub network_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActuateResponse {
    pub report: StepReport,
    pub cursor: u32,
}

async fn actuate(State(app): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<ActuateRequest>) -> Result<Response, ApiError> {
    let shared = app.session(&id).await?;
    let mut s = shared.write().await;
    let report = s.actuate(&req.network_hash).map_err(|e| ApiError::from(e).with_hash(s.network_hash()))?;
    app.persist(&s)?;
    Ok(ok(s.network_hash(), ActuateResponse { report, cursor: s.cursor }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeasurementBatch {
    pub samples: Vec<MeasurementSample>,
}

async fn measurements(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(batch): Json<MeasurementBatch>,
) -> Result<Response, ApiError> {
    let shared = app.session(&id).await?;
    let mut s = shared.write().await;
    let summary: IngestSummary = s.ingest(&batch.samples);
    app.persist(&s)?;
    Ok(ok(s.network_hash(), summary))
}

#[derive(Debug, Default, Deserialize)]
pub struct BoundaryQuery {
    pub bus: Option<u32>,
}

async fn boundary(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<BoundaryQuery>,
) -> Result<Response, ApiError> {
    let shared = app.session(&id).await?;
    let s = shared.read().await;
    let state: BoundaryState = s.boundary(q.bus, now()).map_err(|e| ApiError::from(e).with_hash(s.network_hash()))?;
    Ok(ok(s.network_hash(), state))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynchronizeRequest {
    pub remote: BoundaryState,
    pub participating: Vec<u32>,
    /// Local end of the tie; defaults to the session's boundary bus.
    #[serde(default)]
    pub local_bus: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncStatus {
    Recommended,
    Indeterminate,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynchronizeResponse {
    pub status: SyncStatus,
    pub recommendation: SyncRecommendation,
}

async fn synchronize(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<SynchronizeRequest>,
) -> Result<Response, ApiError> {
    let shared = app.session(&id).await?;
    let job = shared.read().await.sync_job(req.remote, req.participating, req.local_bus, &app.config)?;
    let hash = job.network_hash.clone();
    let (job, rec) = blocking(move || {
        let r = job.run();
        (job, r)
    })
    .await?;
    let rec = rec.map_err(|e| ApiError::from(e).with_hash(hash.clone()))?;
    shared.write().await.record_sync(&job.network_hash, &rec);
    let status = if rec.converged { SyncStatus::Recommended } else { SyncStatus::Indeterminate };
    Ok(ok(hash, SynchronizeResponse { status, recommendation: rec }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConfirmRequest {
    pub network_hash: String,
}

async fn confirm_sync(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ConfirmRequest>,
) -> Result<Response, ApiError> {
    let shared = app.session(&id).await?;
    let mut s = shared.write().await;
    let cfg = app.config.clone();
    let rec = s.confirm_sync(&req.network_hash, &cfg).map_err(|e| ApiError::from(e).with_hash(s.network_hash()))?;
    app.persist(&s)?;
    Ok(ok(s.network_hash(), rec))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportsView {
    pub cursor: u32,
    pub steps: u32,
    pub reports: Vec<StepReport>,
}

async fn reports(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = app.session(&id).await?;
    let s = s.read().await;
    Ok(ok(s.network_hash(), ReportsView { cursor: s.cursor, steps: s.steps(), reports: s.reports.clone() }))
}

async fn require_token(State(app): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.config.server.token {
        let presented = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/network", get(get_network))
        .route("/sessions/{id}/validate", post(validate))
        .route("/sessions/{id}/actuate", post(actuate))
        .route("/sessions/{id}/measurements", post(measurements))
        .route("/sessions/{id}/boundary", get(boundary))
        .route("/sessions/{id}/synchronize", post(synchronize))
        .route("/sessions/{id}/synchronize/confirm", post(confirm_sync))
        .route("/sessions/{id}/reports", get(reports))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}
