//! HTTP API over a workspace.
//!
//! Each run is held behind its own mutex, so mutations of a run apply one
//! at a time. Reads of run progress come from a snapshot refreshed after
//! every mutation and never wait on a running step.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dikw_core::orchestrator::ReviewOutcome;
use dikw_core::{ReviewRequest, Run, RunConfig, RunSnapshot, TopicStatus, Workspace};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{ApiError, ErrorCode};
use crate::ops;

/// Machine-readable description of every endpoint.
pub const OPENAPI: &str = include_str!("../openapi.json");

/// Env var holding the static bearer token; unset disables auth.
pub const TOKEN_ENV: &str = "DIKW_API_TOKEN";

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

struct RunHandle {
    run: Mutex<Run>,
    snapshot: RwLock<RunSnapshot>,
    pending: AtomicUsize,
    last_error: RwLock<Option<ApiError>>,
}

impl RunHandle {
    fn new(run: Run) -> Arc<Self> {
        let snapshot = run.snapshot();
        Arc::new(Self {
            run: Mutex::new(run),
            snapshot: RwLock::new(snapshot),
            pending: AtomicUsize::new(0),
            last_error: RwLock::new(None),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Run> {
        self.run.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn refresh(&self, run: &Run) {
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) = run.snapshot();
    }
}

pub struct AppState {
    ws: Workspace,
    token: Option<String>,
    runs: Mutex<HashMap<String, Arc<RunHandle>>>,
}

impl AppState {
    pub fn new(ws: Workspace, token: Option<String>) -> Arc<Self> {
        Arc::new(Self {
            ws,
            token: token.filter(|t| !t.is_empty()),
            runs: Mutex::new(HashMap::new()),
        })
    }

    /// The in-memory handle for a run, opening it from disk on first use.
    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>, ApiError> {
        let mut runs = self.runs.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(h) = runs.get(run_id) {
            return Ok(h.clone());
        }
        if run_id.is_empty() || run_id.contains(['/', '\\', '.']) {
            return Err(ApiError::not_found(format!("run {run_id}")));
        }
        let h = RunHandle::new(Run::open(&self.ws, run_id)?);
        runs.insert(run_id.to_string(), h.clone());
        Ok(h)
    }

    fn insert(&self, run: Run) -> Arc<RunHandle> {
        let id = run.id().to_string();
        let h = RunHandle::new(run);
        self.runs.lock().unwrap_or_else(|p| p.into_inner()).insert(id, h.clone());
        h
    }
}

/// Steps the run in the background until nothing more is runnable.
fn drive(h: Arc<RunHandle>) {
    h.pending.fetch_add(1, Ordering::SeqCst);
    tokio::task::spawn_blocking(move || {
        let mut run = h.lock();
        let result = run.step();
        h.refresh(&run);
        *h.last_error.write().unwrap_or_else(|p| p.into_inner()) = result.err().map(ApiError::from);
        drop(run);
        h.pending.fetch_sub(1, Ordering::SeqCst);
    });
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    Ok(serde_json::from_slice(body)?)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub run_id: String,
}

async fn create_run(State(app): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Created>), ApiError> {
    let config: RunConfig = parse(&body)?;
    let app2 = app.clone();
    let h = blocking(move || Ok(app2.insert(Run::submit(&app2.ws, config)?))).await?;
    let run_id = h.snapshot.read().unwrap_or_else(|p| p.into_inner()).run_id.clone();
    drive(h);
    Ok((StatusCode::CREATED, Json(Created { run_id })))
}

async fn list_runs(State(app): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    blocking(move || Ok(Json(app.ws.list_runs()?))).await
}

/// Run snapshot plus whether a background step is still pending.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunView {
    #[serde(flatten)]
    pub snapshot: RunSnapshot,
    pub busy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<ApiError>,
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RunView>, ApiError> {
    let h = blocking(move || app.handle(&id)).await?;
    let busy = h.pending.load(Ordering::SeqCst) > 0;
    let snapshot = h.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone();
    let last_error = h.last_error.read().unwrap_or_else(|p| p.into_inner()).clone();
    Ok(Json(RunView { snapshot, busy, last_error }))
}

#[derive(Debug, Deserialize)]
struct TopicFilter {
    status: Option<String>,
}

fn parse_status(s: &str) -> Result<TopicStatus, ApiError> {
    serde_json::from_value(json!(s)).map_err(|_| {
        ApiError::validation(format!("unknown status `{s}`"))
            .with_detail(json!({ "allowed": TopicStatus::ALL }))
    })
}

async fn list_topics(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(filter): Query<TopicFilter>,
) -> Result<Response, ApiError> {
    let status = filter.status.as_deref().map(parse_status).transpose()?;
    let h = blocking(move || app.handle(&id)).await?;
    let snap = h.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone();
    let topics: Vec<_> = snap
        .topics
        .into_iter()
        .filter(|t| status.is_none_or(|s| t.status == s))
        .collect();
    Ok(Json(topics).into_response())
}

async fn get_topic(
    State(app): State<Arc<AppState>>,
    Path((id, topic)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let h = blocking(move || app.handle(&id)).await?;
    let state = blocking(move || {
        let run = h.lock();
        let tid = ops::resolve_topic(&run, &topic)?;
        Ok(run.topic_state(&tid).cloned().expect("resolved topic has state"))
    })
    .await?;
    Ok(Json(state).into_response())
}

#[derive(Debug, Deserialize)]
struct ReviewBody {
    #[serde(default)]
    run_id: Option<String>,
    #[serde(flatten)]
    request: ReviewRequest,
}

async fn review_topic(
    State(app): State<Arc<AppState>>,
    Path(topic): Path<String>,
    body: Bytes,
) -> Result<Json<ReviewOutcome>, ApiError> {
    let body: ReviewBody = parse(&body)?;
    let (h, outcome) = blocking(move || {
        let run_ids = match &body.run_id {
            Some(id) => vec![id.clone()],
            None => app.ws.list_runs()?,
        };
        let mut hits = Vec::new();
        for id in run_ids {
            let h = app.handle(&id)?;
            let found = ops::resolve_topic(&h.lock(), &topic);
            match found {
                Ok(tid) => hits.push((h, tid)),
                Err(e) if e.code == ErrorCode::NotFound && body.run_id.is_none() => {}
                Err(e) => return Err(e),
            }
        }
        if hits.len() > 1 {
            return Err(ApiError::validation(format!("topic {topic} occurs in several runs; pass run_id")));
        }
        let (h, tid) = hits
            .pop()
            .ok_or_else(|| ApiError::not_found(format!("topic {topic} in any run")))?;
        let outcome = {
            let mut run = h.lock();
            let out = run.review(&tid, body.request)?;
            h.refresh(&run);
            out
        };
        Ok((h, outcome))
    })
    .await?;
    if outcome.candidate.is_none() && outcome.state.status != TopicStatus::AwaitingApproval {
        drive(h);
    }
    Ok(Json(outcome))
}

async fn get_artifact(State(app): State<Arc<AppState>>, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let hash = hash.rsplit('/').next().unwrap_or_default().to_ascii_lowercase();
    let artifact = blocking(move || app.ws.find_artifact(&hash)?.ok_or_else(|| ApiError::not_found(format!("artifact {hash}"))))
        .await?;
    Ok(Json(artifact).into_response())
}

#[derive(Debug, Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn get_portfolio(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> Result<Response, ApiError> {
    let format = q.format.unwrap_or_else(|| "json".into());
    if format != "json" && format != "md" {
        return Err(ApiError::validation(format!("unknown format `{format}`; use json or md")));
    }
    let h = blocking(move || app.handle(&id)).await?;
    let export = blocking(move || Ok(h.lock().portfolio()?)).await?;
    Ok(if format == "md" {
        ([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], ops::portfolio_md(&export)?).into_response()
    } else {
        ([(header::CONTENT_TYPE, "application/json")], ops::portfolio_json(&export)?).into_response()
    })
}

async fn get_actions(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let h = blocking(move || app.handle(&id)).await?;
    let log = blocking(move || Ok(h.lock().action_log()?)).await?;
    Ok(Json(log).into_response())
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn method_not_allowed() -> Response {
    let err = ApiError::new(ErrorCode::ValidationFailed, "method not allowed for this endpoint");
    (StatusCode::METHOD_NOT_ALLOWED, Json(err)).into_response()
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

async fn auth(State(app): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    match &app.token {
        Some(token) if req.uri().path() != "/healthz" && bearer(req.headers()) != Some(token.as_str()) => {
            let err = ApiError::validation("missing or invalid bearer token").with_detail(json!({ "kind": "unauthorized" }));
            (StatusCode::UNAUTHORIZED, Json(err)).into_response()
        }
        _ => next.run(req).await,
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/openapi.json", get(openapi))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/topics", get(list_topics))
        .route("/runs/{id}/topics/{topic}", get(get_topic))
        .route("/runs/{id}/portfolio", get(get_portfolio))
        .route("/runs/{id}/actions", get(get_actions))
        .route("/topics/{topic}/review", post(review_topic))
        .route("/artifacts/{hash}", get(get_artifact))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app)
}

/// Serves the API until interrupted.
pub async fn serve(app: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
