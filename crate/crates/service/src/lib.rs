//! HTTP job service for masked embedding edits.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/assets` | upload bytes; `?kind=image\|mask\|latent` optional |
//! | GET | `/assets` | list; `?kind=` filters |
//! | GET | `/assets/{address}` | download |
//! | POST | `/jobs` | submit a recipe as a flat JSON object |
//! | GET | `/jobs/{id}` | job record |
//! | GET | `/jobs/{id}/events` | server-sent progress events |
//! | GET | `/jobs/{id}/result` | result bundle, 409 until done |

pub mod jobs;
pub mod store;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use embedit_core::recipe::{self, AssetSource, EditKind, EditRecipe};
use embedit_core::{Error as CoreError, Models};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::sync::Semaphore;

use jobs::{JobEntry, JobEvent, JobResult, JobState, JobTable, ProgressRecord, StageSummary};
use store::{AssetStore, StoreError};

pub const PREVIEW_SIDE: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub home: PathBuf,
    pub workers: usize,
    /// A preview is rendered every this many progress reports; 0 disables.
    pub preview_every: usize,
}

impl ServiceConfig {
    pub fn new(home: impl Into<PathBuf>) -> Self {
        Self {
            home: home.into(),
            workers: 1,
            preview_every: 4,
        }
    }

    /// Reads `I2S_HOME` (default `./i2s-data`) and `I2S_WORKERS` (default 1).
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::new(std::env::var_os("I2S_HOME").map(PathBuf::from).unwrap_or_else(|| "i2s-data".into()));
        if let Ok(v) = std::env::var("I2S_WORKERS") {
            cfg.workers = v
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .ok_or_else(|| format!("I2S_WORKERS must be a positive integer, got `{v}`"))?;
        }
        Ok(cfg)
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub models: Arc<Models>,
    pub store: Arc<AssetStore>,
    pub jobs: JobTable,
    workers: Arc<Semaphore>,
}

/// Opens the data directory and schedules jobs that were still queued.
pub async fn start(config: ServiceConfig, models: Models) -> std::io::Result<Arc<AppState>> {
    let store = Arc::new(AssetStore::open(&config.home.join("assets"))?);
    let (jobs, queued) = JobTable::open(&config.home.join("jobs"))?;
    let state = Arc::new(AppState {
        workers: Arc::new(Semaphore::new(config.workers.max(1))),
        config,
        models: Arc::new(models),
        store,
        jobs,
    });
    for id in queued {
        if let Some(entry) = state.jobs.get(&id) {
            tokio::spawn(execute(state.clone(), entry));
        }
    }
    Ok(state)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/assets", post(put_asset).get(list_assets))
        .route("/assets/{address}", get(get_asset))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(job_events))
        .route("/jobs/{id}/result", get(job_result))
        .fallback(|| async { ApiError::NotFound })
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub enum ApiError {
    NotFound,
    BadRequest(String),
    InvalidAsset(String),
    InvalidRecipe { field: String, message: String },
    Conflict(String),
    Integrity(String),
    Internal(String),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound => ApiError::NotFound,
            StoreError::Invalid(m) => ApiError::InvalidAsset(m),
            StoreError::Integrity(m) => ApiError::Integrity(m),
            StoreError::Io(e) => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Recipe { field, reason } => ApiError::InvalidRecipe { field, message: reason },
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message, field) = match self {
            ApiError::NotFound => (StatusCode::NOT_FOUND, "not_found", "no such resource".to_string(), None),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m, None),
            ApiError::InvalidAsset(m) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_asset", m, None),
            ApiError::InvalidRecipe { field, message } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_recipe", message, Some(field))
            }
            ApiError::Conflict(m) => (StatusCode::CONFLICT, "conflict", m, None),
            ApiError::Integrity(m) => (StatusCode::INTERNAL_SERVER_ERROR, "integrity", m, None),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m, None),
        };
        let mut error = json!({ "code": code, "message": message });
        if let Some(f) = field {
            error["field"] = Value::String(f);
        }
        (status, Json(json!({ "error": error }))).into_response()
    }
}

#[derive(Deserialize)]
struct KindQuery {
    kind: Option<String>,
}

fn kind_filter(q: &KindQuery) -> Result<Option<recipe::AssetKind>, ApiError> {
    q.kind
        .as_deref()
        .map(|k| store::parse_kind(k).ok_or_else(|| ApiError::BadRequest(format!("unknown asset kind `{k}`"))))
        .transpose()
}

async fn put_asset(State(s): State<Arc<AppState>>, Query(q): Query<KindQuery>, body: Bytes) -> Result<Response, ApiError> {
    let kind = kind_filter(&q)?;
    let info = s.store.put(&body, kind)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn list_assets(State(s): State<Arc<AppState>>, Query(q): Query<KindQuery>) -> Result<Response, ApiError> {
    Ok(Json(s.store.list(kind_filter(&q)?)?).into_response())
}

async fn get_asset(State(s): State<Arc<AppState>>, Path(address): Path<String>) -> Result<Response, ApiError> {
    let info = s.store.info(&address)?;
    let bytes = s.store.get(&address)?;
    let content_type = if info.kind == "latent" { "application/octet-stream" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

/// Resolves recipe asset references as store addresses.
struct StoreAssets<'a>(&'a AssetStore);

impl AssetSource for StoreAssets<'_> {
    fn fetch(&self, reference: &str) -> embedit_core::Result<Vec<u8>> {
        self.0.get(reference).map_err(|e| CoreError::Image {
            path: None,
            reason: match e {
                StoreError::NotFound => format!("unknown asset `{reference}`"),
                StoreError::Invalid(m) | StoreError::Integrity(m) => m,
                StoreError::Io(e) => e.to_string(),
            },
        })
    }
}

/// Builds a recipe from a flat JSON object. Numbers and booleans are
/// accepted in place of their text form.
pub fn recipe_from_json(body: &Map<String, Value>) -> Result<EditRecipe, CoreError> {
    let field_text = |k: &str, v: &Value| match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(CoreError::Recipe {
            field: k.to_string(),
            reason: "expected a string, number or boolean".into(),
        }),
    };
    let kind = match body.get("kind") {
        Some(v) => EditKind::parse(&field_text("kind", v)?)?,
        None => {
            return Err(CoreError::Recipe {
                field: "kind".into(),
                reason: "missing".into(),
            })
        }
    };
    let mut recipe = EditRecipe::new(kind);
    for (k, v) in body.iter().filter(|(k, _)| k.as_str() != "kind") {
        recipe.set(k.clone(), field_text(k, v)?);
    }
    recipe.validate()?;
    Ok(recipe)
}

async fn submit_job(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let body: Map<String, Value> =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("expected a JSON object: {e}")))?;
    let recipe = recipe_from_json(&body)?;
    recipe::preflight(s.models.networks(), &recipe, &StoreAssets(&s.store))?;
    let entry = s.jobs.create(recipe.kind().name(), recipe.to_string())?;
    let record = entry.record();
    tokio::spawn(execute(s.clone(), entry));
    Ok((StatusCode::CREATED, Json(json!({ "id": record.id, "state": record.state }))).into_response())
}

async fn list_jobs(State(s): State<Arc<AppState>>) -> Response {
    Json(s.jobs.list()).into_response()
}

fn job(s: &AppState, id: &str) -> Result<Arc<JobEntry>, ApiError> {
    s.jobs.get(id).ok_or(ApiError::NotFound)
}

async fn get_job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(job(&s, &id)?.record()).into_response())
}

async fn job_result(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let record = job(&s, &id)?.record();
    match (record.state, record.result) {
        (JobState::Done, Some(result)) => Ok(Json(result).into_response()),
        (state, _) => Err(ApiError::Conflict(format!("job is {}", json!(state).as_str().unwrap_or("?")))),
    }
}

async fn job_events(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let entry = job(&s, &id)?;
    Ok(Sse::new(event_stream(entry)).keep_alive(KeepAlive::default()))
}

/// Replays a job's events from the start, then follows it until a terminal
/// event has been sent.
pub fn event_stream(entry: Arc<JobEntry>) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = entry.subscribe();
    futures::stream::unfold((entry, rx, 0usize, false), |(entry, mut rx, cursor, finished)| async move {
        if finished {
            return None;
        }
        loop {
            rx.borrow_and_update();
            if let Some(event) = entry.events_from(cursor).into_iter().next() {
                let sse = Event::default()
                    .id(cursor.to_string())
                    .event(event.name())
                    .data(serde_json::to_string(&event).expect("events serialize"));
                return Some((Ok(sse), (entry, rx, cursor + 1, event.is_terminal())));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn execute(state: Arc<AppState>, entry: Arc<JobEntry>) {
    let Ok(_permit) = state.workers.clone().acquire_owned().await else {
        return;
    };
    match entry.start() {
        Ok(true) => {}
        _ => return,
    }
    let worker_state = state.clone();
    let worker_entry = entry.clone();
    let outcome = tokio::task::spawn_blocking(move || run_job(&worker_state, &worker_entry)).await;
    let event = match outcome {
        Ok(Ok(result)) => JobEvent::Done { result },
        Ok(Err(error)) => JobEvent::Failed { error },
        Err(e) => JobEvent::Failed {
            error: format!("worker crashed: {e}"),
        },
    };
    let _ = entry.push(event);
}

fn run_job(state: &AppState, entry: &JobEntry) -> Result<JobResult, String> {
    let recipe = EditRecipe::parse(&entry.record().recipe).map_err(|e| e.to_string())?;
    let nets = state.models.networks();
    let every = state.config.preview_every;
    let mut reports = 0usize;
    let mut sink_error = None;
    let output = recipe::run_recipe(nets, &recipe, &StoreAssets(&state.store), &mut |stage, p| {
        reports += 1;
        let preview = (every > 0 && reports.is_multiple_of(every))
            .then(|| nets.generator.forward(p.w, p.n).ok())
            .flatten()
            .and_then(|img| {
                let small = img.resize_bilinear(PREVIEW_SIDE, PREVIEW_SIDE);
                state.store.put(&small.encode_png(), Some(recipe::AssetKind::Image)).ok()
            })
            .map(|info| info.address);
        let event = JobEvent::Progress(ProgressRecord {
            stage: stage.to_string(),
            iteration: p.iteration,
            loss: p.loss,
            preview,
        });
        if let Err(e) = entry.push(event) {
            sink_error.get_or_insert(e.to_string());
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = sink_error {
        return Err(format!("could not record progress: {e}"));
    }
    let put = |bytes: Vec<u8>, kind| {
        state
            .store
            .put(&bytes, Some(kind))
            .map(|i| i.address)
            .map_err(|e| format!("could not store result: {e:?}"))
    };
    Ok(JobResult {
        images: output
            .images
            .iter()
            .map(|img| put(img.encode_png(), recipe::AssetKind::Image))
            .collect::<Result<_, _>>()?,
        latents: output
            .latents
            .iter()
            .map(|(w, n)| put(embedit_core::latent_file::encode(w, n), recipe::AssetKind::Latent))
            .collect::<Result<_, _>>()?,
        stages: output
            .stages
            .iter()
            .map(|s| StageSummary {
                name: s.name.clone(),
                psnr: s.psnr,
                final_loss: s.final_loss,
            })
            .collect(),
        log: output.stage_log(),
    })
}
