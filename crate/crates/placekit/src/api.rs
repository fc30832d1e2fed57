//! HTTP service over a directory of projects.
//!
//! Long stages run as polled jobs. Mutating requests on one project are
//! serialized in arrival order; frames and previews are served concurrently.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State as AppStateRef};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{PlacementFile, PlaneSummary, RegionSpec};
use crate::config::Settings;
use crate::error::PipelineError;
use crate::pipeline::{self, PlaceParams};
use crate::project::{Project, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: String,
    pub project: String,
    pub status: JobStatus,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Job {
    fn terminal(&self) -> bool {
        matches!(self.status, JobStatus::Done | JobStatus::Failed)
    }

    fn start(&mut self) {
        if !self.terminal() {
            self.status = JobStatus::Running;
        }
    }

    fn advance(&mut self, fraction: f64) {
        if !self.terminal() && fraction.is_finite() {
            self.progress = self.progress.max(fraction.clamp(0.0, 1.0));
        }
    }

    fn finish(&mut self, result: Result<(), String>) {
        if self.terminal() {
            return;
        }
        match result {
            Ok(()) => {
                self.status = JobStatus::Done;
                self.progress = 1.0;
            }
            Err(e) => {
                self.status = JobStatus::Failed;
                self.error = Some(e);
            }
        }
    }
}

struct Slot {
    root: PathBuf,
    writer: tokio::sync::Mutex<()>,
}

pub struct AppState {
    root: PathBuf,
    settings: Settings,
    projects: Mutex<BTreeMap<String, Arc<Slot>>>,
    jobs: Mutex<BTreeMap<String, Arc<Mutex<Job>>>>,
}

pub type SharedState = Arc<AppState>;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Pipeline(PipelineError),
    Internal(String),
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::Pipeline(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Pipeline(e) => (
                StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
                e.to_string(),
            ),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        if status.is_server_error() {
            log::error!("{message}");
        }
        (status, Json(json!({ "error": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    let s = s.trim_matches('-').to_string();
    if s.is_empty() {
        "project".into()
    } else {
        s
    }
}

impl AppState {
    /// Serves projects under `root`, picking up any that already exist there.
    pub fn new(root: &Path, settings: Settings) -> std::io::Result<SharedState> {
        std::fs::create_dir_all(root)?;
        let mut projects = BTreeMap::new();
        for entry in std::fs::read_dir(root)? {
            let path = entry?.path();
            if Project::exists(&path) {
                if let Some(id) = path.file_name().and_then(|n| n.to_str()) {
                    projects.insert(id.to_string(), Arc::new(Slot::new(path.clone())));
                }
            }
        }
        Ok(Arc::new(AppState {
            root: root.to_path_buf(),
            settings,
            projects: Mutex::new(projects),
            jobs: Mutex::new(BTreeMap::new()),
        }))
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.projects
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no project {id}")))
    }

    fn new_job(&self, kind: &str, project: &str) -> Arc<Mutex<Job>> {
        let mut jobs = self.jobs.lock().unwrap();
        let id = format!("j{}", jobs.len() + 1);
        let job = Arc::new(Mutex::new(Job {
            id: id.clone(),
            kind: kind.to_string(),
            project: project.to_string(),
            status: JobStatus::Queued,
            progress: 0.0,
            error: None,
        }));
        jobs.insert(id, job.clone());
        job
    }
}

impl Slot {
    fn new(root: PathBuf) -> Self {
        Slot {
            root,
            writer: tokio::sync::Mutex::new(()),
        }
    }

    fn open(&self) -> Result<Project, PipelineError> {
        Project::open(&self.root)
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, PipelineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
        .map_err(ApiError::from)
}

/// Queues `work` behind the project's writer lock and returns the job id.
fn spawn_job<F>(app: &SharedState, slot: Arc<Slot>, project: &str, kind: &str, work: F) -> String
where
    F: FnOnce(&mut Project, &Settings, pipeline::Progress<'_>) -> Result<(), PipelineError> + Send + 'static,
{
    let job = app.new_job(kind, project);
    let id = job.lock().unwrap().id.clone();
    let settings = app.settings.clone();
    tokio::spawn(async move {
        let _writer = slot.writer.lock().await;
        job.lock().unwrap().start();
        let tracker = job.clone();
        let root = slot.root.clone();
        let result = tokio::task::spawn_blocking(move || {
            let progress = |_: &str, f: f64| tracker.lock().unwrap().advance(f);
            let mut project = Project::open(&root)?;
            work(&mut project, &settings, &progress)
        })
        .await;
        let outcome = match result {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(e.to_string()),
            Err(e) => Err(format!("worker panicked: {e}")),
        };
        if let Err(e) = &outcome {
            log::warn!("job failed: {e}");
        }
        job.lock().unwrap().finish(outcome);
    });
    id
}

#[derive(Debug, Deserialize)]
struct CreateProject {
    name: String,
    frames_dir: PathBuf,
    flow_dir: PathBuf,
}

async fn create_project(
    AppStateRef(app): AppStateRef<SharedState>,
    Json(req): Json<CreateProject>,
) -> ApiResult<Json<serde_json::Value>> {
    // the id is reserved before the inputs are checked and released on failure
    let (id, root) = {
        let mut projects = app.projects.lock().unwrap();
        let base = slug(&req.name);
        let mut id = base.clone();
        let mut n = 1;
        while projects.contains_key(&id) || app.root.join(&id).exists() {
            n += 1;
            id = format!("{base}-{n}");
        }
        let root = app.root.join(&id);
        projects.insert(id.clone(), Arc::new(Slot::new(root.clone())));
        (id, root)
    };
    let name = req.name.clone();
    let dir = root.clone();
    if let Err(e) =
        blocking(move || pipeline::create_project(&dir, &name, &req.frames_dir, &req.flow_dir).map(|_| ())).await
    {
        app.projects.lock().unwrap().remove(&id);
        let _ = std::fs::remove_dir_all(&root);
        return Err(e);
    }
    log::info!("created project {id}");
    Ok(Json(json!({ "id": id })))
}

async fn start_reconstruct(
    AppStateRef(app): AppStateRef<SharedState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let slot = app.slot(&id)?;
    slot.open()?.require(State::FramesLoaded)?;
    let job = spawn_job(&app, slot, &id, "reconstruct", |p, s, progress| {
        pipeline::reconstruct(p, s, progress).map(|_| ())
    });
    Ok(Json(json!({ "job": job })))
}

async fn start_render(
    AppStateRef(app): AppStateRef<SharedState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let slot = app.slot(&id)?;
    slot.open()?.require(State::RegionSet)?;
    let job = spawn_job(&app, slot, &id, "render", |p, s, progress| {
        pipeline::render(p, s, false, progress).map(|_| ())
    });
    Ok(Json(json!({ "job": job })))
}

async fn job_status(AppStateRef(app): AppStateRef<SharedState>, UrlPath(jid): UrlPath<String>) -> ApiResult<Json<Job>> {
    let job = app
        .jobs
        .lock()
        .unwrap()
        .get(&jid)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("no job {jid}")))?;
    let snapshot = job.lock().unwrap().clone();
    Ok(Json(snapshot))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    source: Option<String>,
}

async fn frame(
    AppStateRef(app): AppStateRef<SharedState>,
    UrlPath((id, k)): UrlPath<(String, usize)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<Response> {
    let project = app.slot(&id)?.open()?;
    let path = match q.source.as_deref() {
        None | Some("input") => {
            project.require(State::FramesLoaded)?;
            let frames = pipeline::list_frames(&project.meta.frames_dir)?;
            frames
                .get(k)
                .cloned()
                .ok_or_else(|| ApiError::NotFound(format!("frame {k} of {}", frames.len())))?
        }
        Some("out") => {
            project.require(State::Rendered)?;
            project.out_path(k)
        }
        Some(other) => return Err(PipelineError::Config(format!("unknown frame source {other:?}")).into()),
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::NotFound(format!("frame {k}")))?;
    Ok(png(bytes))
}

#[derive(Debug, Serialize)]
struct RegionResponse {
    plane: PlaneSummary,
}

async fn region(
    AppStateRef(app): AppStateRef<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(spec): Json<RegionSpec>,
) -> ApiResult<Json<RegionResponse>> {
    let slot = app.slot(&id)?;
    let _writer = slot.writer.lock().await;
    let settings = app.settings.clone();
    let s = slot.clone();
    let plane = blocking(move || pipeline::select_region(&mut s.open()?, &settings, &spec)).await?;
    Ok(Json(RegionResponse { plane }))
}

#[derive(Debug, Serialize)]
struct PlacementResponse {
    placement: PlacementFile,
}

async fn placement(
    AppStateRef(app): AppStateRef<SharedState>,
    UrlPath(id): UrlPath<String>,
    Json(params): Json<PlaceParams>,
) -> ApiResult<Json<PlacementResponse>> {
    let slot = app.slot(&id)?;
    let _writer = slot.writer.lock().await;
    let settings = app.settings.clone();
    let s = slot.clone();
    let placement = blocking(move || pipeline::place(&mut s.open()?, &settings, &params)).await?;
    Ok(Json(PlacementResponse { placement }))
}

#[derive(Debug, Deserialize)]
struct PreviewQuery {
    frame: usize,
}

async fn preview(
    AppStateRef(app): AppStateRef<SharedState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PreviewQuery>,
) -> ApiResult<Response> {
    let slot = app.slot(&id)?;
    let settings = app.settings.clone();
    let bytes = blocking(move || pipeline::preview(&slot.open()?, &settings, q.frame)).await?;
    Ok(png(bytes))
}

pub fn router(app: SharedState) -> Router {
    Router::new()
        .route("/api/projects", post(create_project))
        .route("/api/projects/{id}/reconstruct", post(start_reconstruct))
        .route("/api/projects/{id}/frame/{k}", get(frame))
        .route("/api/projects/{id}/region", post(region))
        .route("/api/projects/{id}/placement", post(placement))
        .route("/api/projects/{id}/preview", get(preview))
        .route("/api/projects/{id}/render", post(start_render))
        .route("/api/jobs/{jid}", get(job_status))
        .with_state(app)
}

pub async fn serve(app: SharedState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_jobs_are_frozen_and_progress_is_monotone() {
        let mut j = Job {
            id: "j1".into(),
            kind: "render".into(),
            project: "p".into(),
            status: JobStatus::Queued,
            progress: 0.0,
            error: None,
        };
        j.start();
        j.advance(0.4);
        j.advance(0.2);
        assert_eq!(j.progress, 0.4);
        j.finish(Err("boom".into()));
        j.finish(Ok(()));
        j.advance(0.9);
        j.start();
        assert_eq!(j.status, JobStatus::Failed);
        assert_eq!(j.progress, 0.4);
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("My Scene/../x"), "my-scene----x");
        assert_eq!(slug("///"), "project");
    }
}
