//! HTTP front end for the scenario engine. Scenarios run as background jobs
//! and their artifacts land in a content-addressed store on disk, keyed by
//! scenario id, so finished results survive restarts.

use std::collections::HashMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coverage_core::geo::LonLat;
use coverage_core::pipeline::{artifact, hex, write_scenario_artifacts, LANDMASK_FILE};
use coverage_core::scenario::{ScenarioConfig, ScenarioEngine, ScenarioError, Station};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub id: String,
    pub status: JobStatus,
    pub progress: f64,
    /// Path of the result resource once done.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobHandle {
    fn new(id: &str, status: JobStatus) -> Self {
        let done = status == JobStatus::Done;
        Self {
            id: id.to_string(),
            status,
            progress: if done { 1.0 } else { 0.0 },
            result: done.then(|| format!("/scenario/{id}")),
            error: None,
        }
    }

    fn failed(id: &str, error: String) -> Self {
        Self {
            error: Some(error),
            ..Self::new(id, JobStatus::Failed)
        }
    }

    fn is_terminal(&self) -> bool {
        matches!(self.status, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] coverage_core::pipeline::PipelineError),
}

/// Finished scenarios, one directory per id. Directories are written under
/// a temporary name and renamed into place, so a visible id is complete.
#[derive(Debug, Clone)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| StoreError::Io {
            path: root.display().to_string(),
            source,
        })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &FsPath {
        &self.root
    }

    fn valid_id(id: &str) -> bool {
        id.len() == 32 && id.bytes().all(|b| b.is_ascii_hexdigit())
    }

    pub fn contains(&self, id: &str) -> bool {
        Self::valid_id(id) && self.root.join(id).is_dir()
    }

    pub fn artifact_path(&self, id: &str, name: &str) -> Option<PathBuf> {
        self.contains(id).then(|| self.root.join(id).join(name))
    }

    pub fn save(&self, engine: &ScenarioEngine, cfg: &ScenarioConfig) -> Result<String, StoreError> {
        let result = engine.run(cfg).map_err(coverage_core::pipeline::PipelineError::from)?;
        let id = result.id.clone();
        if self.contains(&id) {
            return Ok(id);
        }
        let tmp = staging_dir(&self.root, &id);
        write_scenario_artifacts(engine, &result, &tmp)?;
        if let Err(source) = std::fs::rename(&tmp, self.root.join(&id)) {
            let _ = std::fs::remove_dir_all(&tmp);
            // lost a race with an identical job
            if !self.contains(&id) {
                return Err(StoreError::Io {
                    path: tmp.display().to_string(),
                    source,
                });
            }
        }
        Ok(id)
    }
}

fn staging_dir(root: &FsPath, id: &str) -> PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static SEQ: AtomicU64 = AtomicU64::new(0);
    root.join(format!(
        ".tmp-{id}-{}-{}",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    ))
}

pub struct AppState {
    engine: RwLock<Option<Arc<ScenarioEngine>>>,
    work_dir: Option<PathBuf>,
    store: ResultStore,
    jobs: Mutex<HashMap<String, JobHandle>>,
    relocations: Arc<Semaphore>,
}

impl AppState {
    pub fn new(store: ResultStore, work_dir: Option<PathBuf>, max_relocations: usize) -> Self {
        Self {
            engine: RwLock::new(None),
            work_dir,
            store,
            jobs: Mutex::new(HashMap::new()),
            relocations: Arc::new(Semaphore::new(max_relocations.max(1))),
        }
    }

    pub fn set_engine(&self, engine: Arc<ScenarioEngine>) {
        *self.engine.write().unwrap() = Some(engine);
    }

    fn engine(&self) -> Result<Arc<ScenarioEngine>, ApiError> {
        self.engine
            .read()
            .unwrap()
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "graph not loaded yet"))
    }

    fn set_job(&self, job: JobHandle) {
        self.jobs.lock().unwrap().insert(job.id.clone(), job);
    }

    fn job(&self, id: &str) -> Option<JobHandle> {
        if let Some(j) = self.jobs.lock().unwrap().get(id) {
            return Some(j.clone());
        }
        self.store.contains(id).then(|| JobHandle::new(id, JobStatus::Done))
    }
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

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        let status = match e {
            ScenarioError::Invalid(_) | ScenarioError::UnknownStation { .. } | ScenarioError::EmptyRange => {
                StatusCode::BAD_REQUEST
            }
            ScenarioError::AllClosed => StatusCode::CONFLICT,
            ScenarioError::Snap { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/graph/summary", get(graph_summary))
        .route("/graph/landmask", get(landmask))
        .route("/scenario/evaluate", post(evaluate))
        .route("/scenario/{id}", get(job_status))
        .route("/scenario/{id}/{artifact}", get(scenario_artifact))
        .route("/station/{index}/relocate", post(relocate))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphSummary {
    pub node_count: usize,
    pub edge_count: usize,
    /// min lon, min lat, max lon, max lat
    pub bbox: [f64; 4],
    pub stations: Vec<Station>,
    pub brown_node_count: usize,
    pub critical_location_count: usize,
    pub graph_checksum: String,
}

async fn graph_summary(State(state): State<Arc<AppState>>) -> Result<Json<GraphSummary>, ApiError> {
    let e = state.engine()?;
    let g = e.graph();
    let (a, b, c, d) = g.bbox();
    Ok(Json(GraphSummary {
        node_count: g.node_count(),
        edge_count: g.edge_count(),
        bbox: [a, b, c, d],
        stations: e.stations().to_vec(),
        brown_node_count: e.brown_count(),
        critical_location_count: e.critical_locations().len(),
        graph_checksum: hex(e.graph_checksum()),
    }))
}

async fn landmask(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "no land mask available");
    let path = state
        .work_dir
        .as_ref()
        .map(|d| d.join(LANDMASK_FILE))
        .ok_or_else(not_found)?;
    let body = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "application/geo+json")], body).into_response())
}

/// Queues `cfg` unless an identical scenario is already stored or running.
async fn submit(state: Arc<AppState>, cfg: ScenarioConfig) -> Result<(StatusCode, Json<JobHandle>), ApiError> {
    let engine = state.engine()?;
    let resolved = engine.resolve(&cfg)?;
    let id = resolved.id(engine.graph_checksum());
    if state.store.contains(&id) {
        return Ok((StatusCode::OK, Json(JobHandle::new(&id, JobStatus::Done))));
    }
    {
        let mut jobs = state.jobs.lock().unwrap();
        if let Some(j) = jobs.get(&id) {
            if j.status != JobStatus::Failed {
                return Ok((StatusCode::ACCEPTED, Json(j.clone())));
            }
        }
        jobs.insert(id.clone(), JobHandle::new(&id, JobStatus::Queued));
    }

    let fresh_dijkstra = !resolved.relocations.is_empty();
    let job_id = id.clone();
    tokio::spawn(async move {
        let _permit = match fresh_dijkstra {
            true => Some(
                state
                    .relocations
                    .clone()
                    .acquire_owned()
                    .await
                    .expect("semaphore never closes"),
            ),
            false => None,
        };
        state.set_job(JobHandle {
            progress: 0.5,
            ..JobHandle::new(&job_id, JobStatus::Running)
        });
        let worker = Arc::clone(&state);
        let out = tokio::task::spawn_blocking(move || worker.store.save(&engine, &cfg)).await;
        let job = match out {
            Ok(Ok(_)) => JobHandle::new(&job_id, JobStatus::Done),
            Ok(Err(e)) => JobHandle::failed(&job_id, e.to_string()),
            Err(e) => JobHandle::failed(&job_id, format!("worker panicked: {e}")),
        };
        if job.status == JobStatus::Failed {
            log::error!("scenario {job_id} failed: {:?}", job.error);
        }
        state.set_job(job);
    });
    Ok((StatusCode::ACCEPTED, Json(JobHandle::new(&id, JobStatus::Queued))))
}

async fn evaluate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<JobHandle>), ApiError> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "body is not UTF-8"))?;
    let cfg = if text.trim().is_empty() {
        ScenarioConfig::baseline()
    } else {
        ScenarioConfig::from_json_str(text)?
    };
    submit(state, cfg).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelocateRequest {
    lon: f64,
    lat: f64,
    /// Scenario the relocation applies to; baseline when absent.
    #[serde(default)]
    base: Option<ScenarioConfig>,
}

async fn relocate(
    State(state): State<Arc<AppState>>,
    Path(index): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<JobHandle>), ApiError> {
    let engine = state.engine()?;
    let count = engine.stations().len();
    let index = index
        .parse::<usize>()
        .ok()
        .filter(|&i| i < count)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no station {index} ({count} stations)")))?;
    let req: RelocateRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid relocation: {e}")))?;
    let pos = LonLat::new(req.lon, req.lat).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    engine.snap(pos)?;
    let mut cfg = req.base.unwrap_or_default();
    cfg.relocations.insert(index, pos);
    submit(state, cfg).await
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobHandle>, ApiError> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown scenario {id}")))
}

async fn scenario_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let (file, content_type) = match name.as_str() {
        "bands" => (artifact::BANDS, "application/geo+json"),
        "diff" => (artifact::DIFF, "application/geo+json"),
        "areas" => (artifact::AREAS, "application/geo+json"),
        "compliance" => (artifact::COMPLIANCE, "application/json"),
        "summary" => (artifact::SUMMARY, "application/json"),
        "scenario" => (artifact::SCENARIO, "application/json"),
        _ => return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown artifact {name}"))),
    };
    let Some(path) = state.store.artifact_path(&id, file) else {
        return Err(match state.job(&id) {
            Some(j) if j.is_terminal() => ApiError::new(
                StatusCode::CONFLICT,
                j.error.unwrap_or_else(|| "scenario failed".into()),
            ),
            Some(j) => ApiError::new(
                StatusCode::CONFLICT,
                format!("scenario {id} is {:?}", j.status).to_lowercase(),
            ),
            None => ApiError::new(StatusCode::NOT_FOUND, format!("unknown scenario {id}")),
        });
    };
    let body = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type)], body).into_response())
}
