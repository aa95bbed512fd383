//! Studio backend routes.
//!
//! Every task is a subdirectory of the tasks root holding a `task.json`.
//! Sessions and jobs live in memory; accepted samples and rejections are
//! written straight into the task's manifest, which is the only state that
//! survives a restart.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use augment_core::backend::wire::ErrorEnvelope;
use augment_core::backend::Backends;
use augment_core::combine::CombinationKey;
use augment_core::dataset::{
    append_generated, load_manifest, read_manifest, save_manifest, DatasetManifest, SampleRecord, Tombstone,
};
use augment_core::engine::GenerationConfig;
use augment_core::{extract_regions, BitMask, CoverageBand, Error, RasterImage, RegionSpec};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::jobs::{JobQueue, JobSnapshot, JobState, RegionSummary, DEFAULT_WORKERS};
use crate::pipeline::{generation_regions, run_base};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::Core(e) => match e {
                Error::Validation(_)
                | Error::Geometry(_)
                | Error::OutOfBounds { .. }
                | Error::BoxOutOfBounds { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
                Error::Config(_) | Error::SchemaVersion { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "config"),
                Error::Image(_) => (StatusCode::UNPROCESSABLE_ENTITY, "bad_image"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
        };
        let body = ErrorEnvelope {
            code: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Session {
    id: String,
    task_id: String,
    base_id: String,
    seed: u64,
    config: GenerationConfig,
    base: RasterImage,
    references: Vec<RasterImage>,
    placement: BitMask,
    regions: Vec<RegionSpec>,
}

pub struct AppState {
    tasks_root: PathBuf,
    settings: Settings,
    backends: Backends,
    sessions: std::sync::RwLock<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    next_session: AtomicU64,
    jobs: JobQueue,
    task_locks: std::sync::Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(tasks_root: impl Into<PathBuf>, settings: Settings, backends: Backends) -> Self {
        Self::with_workers(tasks_root, settings, backends, DEFAULT_WORKERS)
    }

    pub fn with_workers(
        tasks_root: impl Into<PathBuf>,
        settings: Settings,
        backends: Backends,
        workers: usize,
    ) -> Self {
        AppState {
            tasks_root: tasks_root.into(),
            settings,
            backends,
            sessions: Default::default(),
            next_session: AtomicU64::new(1),
            jobs: JobQueue::new(workers),
            task_locks: Default::default(),
        }
    }

    fn task_dir(&self, task_id: &str) -> ApiResult<PathBuf> {
        let valid = !task_id.is_empty()
            && task_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !task_id.starts_with('.');
        let dir = self.tasks_root.join(task_id);
        if !valid || !dir.join(augment_core::dataset::MANIFEST_FILE).is_file() {
            return Err(ApiError::NotFound(format!("unknown task {task_id:?}")));
        }
        Ok(dir)
    }

    fn task_lock(&self, task_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.task_locks
            .lock()
            .unwrap()
            .entry(task_id.to_string())
            .or_default()
            .clone()
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    fn band(&self) -> CoverageBand {
        self.settings.regions
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/mask", put(submit_mask))
        .route("/sessions/{id}/generate", post(start_generation))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/decisions", post(decide))
        .route("/jobs/{id}/keys", get(job_keys))
        .route("/tasks/{id}/manifest", get(get_manifest))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub task_id: String,
    pub base_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: Option<GenerationConfig>,
}

#[derive(Debug, Serialize)]
pub struct RegionsBody {
    pub n: usize,
    pub regions: Vec<RegionSummary>,
}

#[derive(Debug, Serialize)]
pub struct SessionBody {
    pub id: String,
    pub task_id: String,
    pub base_id: String,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub config: GenerationConfig,
    #[serde(flatten)]
    pub regions: RegionsBody,
}

fn summarize(regions: &[RegionSpec]) -> RegionsBody {
    RegionsBody {
        n: regions.len(),
        regions: regions.iter().map(RegionSummary::from).collect(),
    }
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionBody>)> {
    let dir = app.task_dir(&req.task_id)?;
    let config = req.config.unwrap_or_else(|| app.settings.generation.clone());
    config.validate()?;
    let manifest = load_manifest(&dir)?;
    let entry = manifest.task.base(&req.base_id)?;
    let base = RasterImage::load(&dir.join(&entry.image))?;
    let placement = match &entry.placement_mask {
        Some(m) => BitMask::load(&dir.join(m))?,
        None => BitMask::empty(base.width(), base.height())?,
    };
    if placement.dimensions() != base.dimensions() {
        return Err(Error::Geometry(format!("placement mask for {:?} does not match its image", req.base_id)).into());
    }
    let references = manifest.task.references(&dir)?;
    let regions = extract_regions(&base, &placement, app.band())?;
    let id = format!("session-{}", app.next_session.fetch_add(1, Ordering::SeqCst));
    let body = SessionBody {
        id: id.clone(),
        task_id: req.task_id.clone(),
        base_id: req.base_id.clone(),
        width: base.width(),
        height: base.height(),
        seed: req.seed,
        config: config.clone(),
        regions: summarize(&regions),
    };
    let session = Session {
        id: id.clone(),
        task_id: req.task_id,
        base_id: req.base_id,
        seed: req.seed,
        config,
        base,
        references,
        placement,
        regions,
    };
    app.sessions
        .write()
        .unwrap()
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Debug, Deserialize)]
pub struct MaskBody {
    /// Base64 PNG.
    pub mask: String,
}

async fn submit_mask(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<MaskBody>,
) -> ApiResult<Json<RegionsBody>> {
    let session = app.session(&id)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(body.mask.as_bytes())
        .map_err(|e| ApiError::BadRequest(format!("mask is not valid base64: {e}")))?;
    let mask = BitMask::from_png(&bytes)?;
    // Holding the session lock serializes concurrent submissions.
    let mut s = session.lock().await;
    if mask.dimensions() != s.base.dimensions() {
        return Err(Error::Geometry(format!(
            "mask is {}x{} but the base image is {}x{}",
            mask.width(),
            mask.height(),
            s.base.width(),
            s.base.height()
        ))
        .into());
    }
    let regions = extract_regions(&s.base, &mask, app.band())?;
    s.placement = mask;
    s.regions = regions;
    Ok(Json(summarize(&s.regions)))
}

#[derive(Debug, Default, Deserialize)]
pub struct GenerateBody {
    #[serde(default)]
    pub include_infeasible: bool,
}

async fn start_generation(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<GenerateBody>>,
) -> ApiResult<(StatusCode, Json<JobSnapshot>)> {
    let include_infeasible = body.map(|Json(b)| b.include_infeasible).unwrap_or(false);
    let session = app.session(&id)?;
    let s = session.lock().await;
    let usable = generation_regions(&s.regions, include_infeasible).len();
    if usable == 0 {
        return Err(ApiError::Conflict(if s.regions.is_empty() {
            "the placement mask has no regions".into()
        } else {
            "no feasible regions; adjust the mask or set include_infeasible".into()
        }));
    }
    let total = usable * s.config.variations_per_region;
    let (base_id, base, placement, refs, cfg, seed) = (
        s.base_id.clone(),
        s.base.clone(),
        s.placement.clone(),
        s.references.clone(),
        s.config.clone(),
        s.seed,
    );
    let band = app.band();
    let backends = app.backends.clone();
    let job = app
        .jobs
        .submit(&s.id, &s.task_id, &s.base_id, seed, total, move |job| async move {
            run_base(
                &base_id,
                &base,
                &placement,
                &refs,
                &cfg,
                band,
                &backends,
                seed,
                include_infeasible,
                &|done| job.advance(done),
            )
            .await
        });
    Ok((StatusCode::ACCEPTED, Json(job.snapshot())))
}

async fn get_job(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobSnapshot>> {
    let job = app
        .jobs
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown job {id:?}")))?;
    Ok(Json(job.snapshot()))
}

#[derive(Debug, Deserialize)]
pub struct Decision {
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default)]
    pub region: Option<usize>,
    #[serde(default)]
    pub variation: Option<usize>,
    pub accept: bool,
}

#[derive(Debug, Serialize)]
pub struct DecisionOutcome {
    /// False when the decision was already recorded.
    pub applied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<SampleRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tombstone: Option<Tombstone>,
    pub samples: usize,
}

fn finished_job(app: &AppState, id: &str) -> ApiResult<(JobSnapshot, Arc<crate::pipeline::BaseRun>)> {
    let job = app
        .jobs
        .get(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown job {id:?}")))?;
    let snap = job.snapshot();
    match (snap.state, job.run()) {
        (JobState::Done, Some(run)) => Ok((snap, run)),
        (state, _) => Err(ApiError::Conflict(format!("job {id:?} is {state:?}, not done"))),
    }
}

async fn decide(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(d): Json<Decision>,
) -> ApiResult<Json<DecisionOutcome>> {
    let (snap, run) = finished_job(&app, &id)?;
    let key: Option<CombinationKey> = d
        .key
        .as_deref()
        .map(|k| k.parse().map_err(ApiError::Core))
        .transpose()?;
    if let Some(k) = &key {
        k.validate(run.region_count(), run.variations_per_region())?;
    }
    let dir = app.task_dir(&snap.task_id)?;
    let lock = app.task_lock(&snap.task_id);
    let _guard = lock.lock().await;
    let mut manifest = read_manifest(&dir)?;

    if d.accept {
        let key = key.ok_or_else(|| ApiError::BadRequest("accepting needs a combination key".into()))?;
        if manifest.is_excluded(&run.base_id, run.seed, &key) {
            return Err(ApiError::Conflict(format!("key {key} was rejected earlier")));
        }
        let sample = run.generated(&key)?;
        let record = append_generated(&mut manifest, &dir, &sample)?;
        if record.is_some() {
            save_manifest(&manifest, &dir)?;
        }
        return Ok(Json(DecisionOutcome {
            applied: record.is_some(),
            record,
            tombstone: None,
            samples: manifest.samples.len(),
        }));
    }

    let tombstone = match (key, d.region, d.variation) {
        (Some(key), None, None) => Tombstone {
            base_id: run.base_id.clone(),
            seed: run.seed,
            region: None,
            variation: None,
            key: Some(key),
        },
        (None, Some(region), Some(variation)) => {
            run.variation(region, variation)?;
            Tombstone {
                base_id: run.base_id.clone(),
                seed: run.seed,
                region: Some(region),
                variation: Some(variation),
                key: None,
            }
        }
        _ => {
            return Err(ApiError::BadRequest(
                "rejecting needs either a key or a region and variation".into(),
            ))
        }
    };
    let applied = !manifest.provenance.tombstones.contains(&tombstone);
    if applied {
        manifest.provenance.tombstones.push(tombstone.clone());
        save_manifest(&manifest, &dir)?;
    }
    Ok(Json(DecisionOutcome {
        applied,
        record: None,
        tombstone: Some(tombstone),
        samples: manifest.samples.len(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct KeysQuery {
    #[serde(default = "default_key_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_key_count() -> usize {
    24
}

#[derive(Debug, Serialize)]
pub struct KeysBody {
    pub total: u64,
    pub keys: Vec<CombinationKey>,
}

/// Sample keys for review, skipping anything a tombstone excludes.
async fn job_keys(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<KeysQuery>,
) -> ApiResult<Json<KeysBody>> {
    let (snap, run) = finished_job(&app, &id)?;
    let manifest = read_manifest(&app.task_dir(&snap.task_id)?)?;
    let keys = run.sample_keys(q.count, q.seed, |k| !manifest.is_excluded(&run.base_id, run.seed, k))?;
    Ok(Json(KeysBody {
        total: run.combination_count()?,
        keys,
    }))
}

async fn get_manifest(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<DatasetManifest>> {
    let dir = app.task_dir(&id)?;
    let lock = app.task_lock(&id);
    let _guard = lock.lock().await;
    Ok(Json(read_manifest(&dir)?))
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
