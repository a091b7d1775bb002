//! The JSON HTTP API.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/api/search` | ranked search with facets |
//! | GET | `/api/records/{record_id}` | one canonical record |
//! | GET, POST | `/api/providers` | list or add/replace providers |
//! | POST | `/api/harvest/{provider_key}?mode=full\|incremental` | start a harvest (202) |
//! | GET | `/api/harvest/runs/{run_id}` | harvest run status and report |
//! | GET | `/health` | liveness and counts |
//!
//! Every non-2xx response is a single [`ApiError`] object. Until the
//! journal has been replayed every endpoint answers 503.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use mercury_core::catalog::{Catalog, CatalogError};
use mercury_core::harvest::{
    HarvestError, HarvestMode, HarvestReport, HarvestState, Harvester, ProviderConfig, RetryPolicy,
    Transport,
};
use mercury_core::index::query::SearchParams;
use mercury_core::model::{make_record_id, RecordId};
use mercury_core::time::{self, rfc3339, rfc3339_opt};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            message.to_string(),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestRun {
    pub run_id: u64,
    pub provider_key: String,
    pub mode: HarvestMode,
    pub status: RunStatus,
    #[serde(with = "rfc3339")]
    pub started_at: DateTime<Utc>,
    #[serde(default, with = "rfc3339_opt", skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<HarvestReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A configured provider together with its harvest state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderEntry {
    #[serde(flatten)]
    pub config: ProviderConfig,
    pub harvest_state: HarvestState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub live_records: usize,
    pub providers: usize,
    pub uptime_seconds: u64,
}

/// Shared service state. The catalog slot stays empty until the journal
/// replay finishes.
pub struct AppState {
    catalog: OnceLock<Arc<Catalog>>,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    runs: Mutex<BTreeMap<u64, HarvestRun>>,
    next_run: AtomicU64,
    started: Instant,
}

impl AppState {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            catalog: OnceLock::new(),
            transport,
            retry: RetryPolicy::default(),
            runs: Mutex::new(BTreeMap::new()),
            next_run: AtomicU64::new(1),
            started: Instant::now(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Mark the service ready with a replayed catalog.
    pub fn set_catalog(&self, catalog: Arc<Catalog>) {
        if self.catalog.set(catalog).is_err() {
            tracing::warn!("catalog already set; ignoring");
        }
    }

    pub fn catalog(&self) -> Option<&Arc<Catalog>> {
        self.catalog.get()
    }

    pub fn run(&self, id: u64) -> Option<HarvestRun> {
        self.runs.lock().get(&id).cloned()
    }

    fn ready(&self) -> ApiResult<&Arc<Catalog>> {
        self.catalog.get().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "unavailable",
                "journal replay in progress; try again shortly",
            )
        })
    }
}

type Shared = Arc<AppState>;

fn json_body(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn search(State(state): State<Shared>, RawQuery(query): RawQuery) -> ApiResult<Response> {
    let catalog = state.ready()?;
    let pairs = url::form_urlencoded::parse(query.as_deref().unwrap_or("").as_bytes());
    let params = SearchParams::from_pairs(pairs.map(|(k, v)| (k, v.into_owned())));
    let body = catalog
        .search_json(&params)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.code, e.to_string()))?;
    Ok(json_body(StatusCode::OK, body))
}

/// Resolve a path segment to a record id. The canonical encoded form is
/// tried first; otherwise the text after the first `:` is taken as the raw
/// local identifier.
pub fn resolve_record_id(text: &str) -> Option<RecordId> {
    RecordId::parse(text).or_else(|| {
        let (key, local) = text.split_once(':')?;
        make_record_id(key, local).ok()
    })
}

async fn record(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let catalog = state.ready()?;
    let found = resolve_record_id(&id).and_then(|rid| catalog.record(&rid));
    match found {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError::not_found(format!("no live record {id:?}"))),
    }
}

fn provider_entries(catalog: &Catalog) -> ApiResult<Vec<ProviderEntry>> {
    let providers = catalog.providers().map_err(ApiError::internal)?;
    let mut states = catalog.harvest_states().map_err(ApiError::internal)?;
    Ok(providers
        .into_iter()
        .map(|config| {
            let harvest_state = states
                .remove(&config.provider_key)
                .unwrap_or_else(|| HarvestState::new(&config.provider_key));
            ProviderEntry {
                config,
                harvest_state,
            }
        })
        .collect())
}

async fn list_providers(State(state): State<Shared>) -> ApiResult<Response> {
    let catalog = state.ready()?;
    Ok(Json(provider_entries(catalog)?).into_response())
}

async fn add_provider(State(state): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let catalog = state.ready()?;
    let config: ProviderConfig = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_config",
            format!("invalid provider JSON: {e}"),
        )
    })?;
    let key = config.provider_key.clone();
    let created = catalog.put_provider(config).map_err(|e| match e {
        CatalogError::Config(e) => {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string())
        }
        CatalogError::Store(e) => ApiError::internal(e),
    })?;
    let entry = provider_entries(catalog)?
        .into_iter()
        .find(|p| p.config.provider_key == key)
        .ok_or_else(|| ApiError::internal("provider vanished after save"))?;
    let status = if created {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    Ok((status, Json(entry)).into_response())
}

async fn trigger_harvest(
    State(state): State<Shared>,
    Path(key): Path<String>,
    RawQuery(query): RawQuery,
) -> ApiResult<Response> {
    let catalog = state.ready()?.clone();
    let mode = url::form_urlencoded::parse(query.as_deref().unwrap_or("").as_bytes())
        .find(|(k, _)| k == "mode")
        .map(|(_, v)| v.into_owned());
    let mode = match mode.as_deref() {
        None | Some("") => HarvestMode::Incremental,
        Some(m) => m
            .parse::<HarvestMode>()
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_mode", e))?,
    };
    if catalog
        .provider(&key)
        .map_err(ApiError::internal)?
        .is_none()
    {
        return Err(ApiError::not_found(format!("unknown provider {key:?}")));
    }
    let guard = catalog.try_begin_harvest(&key).map_err(|e| match e {
        HarvestError::InProgress(_) => {
            ApiError::new(StatusCode::CONFLICT, "harvest_in_progress", e.to_string())
        }
        other => ApiError::internal(other),
    })?;

    let run_id = state.next_run.fetch_add(1, Ordering::SeqCst);
    let run = HarvestRun {
        run_id,
        provider_key: key.clone(),
        mode,
        status: RunStatus::Running,
        started_at: time::now(),
        finished_at: None,
        report: None,
        error: None,
    };
    state.runs.lock().insert(run_id, run.clone());

    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let harvester =
            Harvester::new(&catalog, worker.transport.as_ref()).with_retry(worker.retry.clone());
        let outcome = harvester.harvest_guarded(&guard, mode);
        drop(guard);
        let mut runs = worker.runs.lock();
        let Some(run) = runs.get_mut(&run_id) else {
            return;
        };
        run.finished_at = Some(time::now());
        match outcome {
            Ok(report) => {
                run.status = if report.error.is_none() {
                    RunStatus::Succeeded
                } else {
                    RunStatus::Failed
                };
                run.error = report.error.clone();
                run.report = Some(report);
            }
            Err(e) => {
                run.status = RunStatus::Failed;
                run.error = Some(e.to_string());
            }
        }
        tracing::info!(run_id, provider = %run.provider_key, status = ?run.status, "harvest run finished");
    });

    Ok((StatusCode::ACCEPTED, Json(run)).into_response())
}

async fn harvest_run(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    state.ready()?;
    id.parse::<u64>()
        .ok()
        .and_then(|id| state.run(id))
        .map(|r| Json(r).into_response())
        .ok_or_else(|| ApiError::not_found(format!("no harvest run {id:?}")))
}

async fn health(State(state): State<Shared>) -> ApiResult<Response> {
    let catalog = state.ready()?;
    let providers = catalog.providers().map_err(ApiError::internal)?.len();
    Ok(Json(Health {
        status: "ok".into(),
        live_records: catalog.len(),
        providers,
        uptime_seconds: state.started.elapsed().as_secs(),
    })
    .into_response())
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "method_not_allowed",
        "method not allowed for this endpoint",
    )
}

/// Build the API router. `cors_origin` additionally allows one
/// cross-origin caller, such as a UI dev server.
pub fn router(state: Shared, cors_origin: Option<&str>) -> Router {
    let app = Router::new()
        .route("/api/search", get(search))
        .route("/api/records/{record_id}", get(record))
        .route("/api/providers", get(list_providers).post(add_provider))
        .route("/api/harvest/{provider_key}", post(trigger_harvest))
        .route("/api/harvest/runs/{run_id}", get(harvest_run))
        .route("/health", get(health))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state);
    match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        ),
        None => app,
    }
}
