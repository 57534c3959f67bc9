//! HTTP API for generation jobs.
//!
//! Handlers only validate and enqueue. A single worker thread owns the
//! diffusion backend and runs one job at a time; at most `queue_capacity`
//! further jobs wait, beyond which submissions get 503. Generated PNGs are
//! kept in memory and, when an output directory is configured, written there
//! with their sidecars under `<output_dir>/<job_id>/`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

use trio_core::dataset::encode_png;
use trio_core::diffusion::{
    generate, write_outputs, DiffusionBackend, FieldError, GenerationDefaults, GenerationRequest,
    GuidanceResolver, Payload,
};

use crate::registry::EncoderSummary;

pub const API_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_QUEUE_CAPACITY: usize = 16;
/// Inline base64 PNGs and WAVs make request bodies larger than axum's default limit.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }

    /// Transitions only move forward: queued, running, then done or failed.
    pub fn can_advance_to(self, next: JobState) -> bool {
        next.rank() > self.rank()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub schema_version: u32,
    pub job_id: String,
    pub state: JobState,
    /// Completed fraction of all denoising iterations, in `[0, 1]`.
    pub progress: f64,
    pub assets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub mode: String,
    pub encoders: String,
}

struct JobRecord {
    status: JobStatus,
    request: GenerationRequest,
}

/// All jobs ever submitted, by id.
#[derive(Default)]
pub struct JobRegistry {
    jobs: Mutex<HashMap<String, JobRecord>>,
}

impl JobRegistry {
    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, JobRecord>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn insert(&self, request: GenerationRequest) -> JobStatus {
        let status = JobStatus {
            schema_version: API_SCHEMA_VERSION,
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            state: JobState::Queued,
            progress: 0.0,
            assets: Vec::new(),
            error: None,
            mode: request.mode(),
            encoders: request.encoder_label(),
        };
        self.lock().insert(
            status.job_id.clone(),
            JobRecord {
                status: status.clone(),
                request,
            },
        );
        status
    }

    pub fn remove(&self, id: &str) {
        self.lock().remove(id);
    }

    pub fn get(&self, id: &str) -> Option<JobStatus> {
        self.lock().get(id).map(|r| r.status.clone())
    }

    /// Moves `id` to `next`; refuses (returns false) any backward or sideways move.
    pub fn advance(&self, id: &str, next: JobState) -> bool {
        let mut jobs = self.lock();
        match jobs.get_mut(id) {
            Some(r) if r.status.state.can_advance_to(next) => {
                r.status.state = next;
                true
            }
            _ => false,
        }
    }

    fn start(&self, id: &str) -> Option<GenerationRequest> {
        if !self.advance(id, JobState::Running) {
            return None;
        }
        self.lock().get(id).map(|r| r.request.clone())
    }

    fn set_progress(&self, id: &str, fraction: f64) {
        if let Some(r) = self.lock().get_mut(id) {
            r.status.progress = r.status.progress.max(fraction.clamp(0.0, 1.0));
        }
    }

    fn finish(&self, id: &str, assets: Vec<String>) {
        let mut jobs = self.lock();
        if let Some(r) = jobs.get_mut(id) {
            if r.status.state.can_advance_to(JobState::Done) {
                r.status.state = JobState::Done;
                r.status.progress = 1.0;
                r.status.assets = assets;
            }
        }
    }

    fn fail(&self, id: &str, message: String) {
        let mut jobs = self.lock();
        if let Some(r) = jobs.get_mut(id) {
            if r.status.state.can_advance_to(JobState::Failed) {
                r.status.state = JobState::Failed;
                r.status.error = Some(message);
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub queue_capacity: usize,
    pub output_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

struct Shared {
    jobs: JobRegistry,
    assets: Mutex<HashMap<String, Bytes>>,
    queue: mpsc::Sender<String>,
    queue_capacity: usize,
    resolver: GuidanceResolver,
    encoders: Vec<EncoderSummary>,
    backend_name: String,
}

/// Shared state handed to every handler.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn jobs(&self) -> &JobRegistry {
        &self.0.jobs
    }
}

/// Starts the worker thread and returns the router.
///
/// The worker exits once the router and every clone of its state are dropped.
pub fn start(
    backend: Arc<dyn DiffusionBackend>,
    resolver: GuidanceResolver,
    encoders: Vec<EncoderSummary>,
    config: ServiceConfig,
) -> Router {
    let capacity = config.queue_capacity.max(1);
    let (tx, rx) = mpsc::channel(capacity);
    let state = AppState(Arc::new(Shared {
        jobs: JobRegistry::default(),
        assets: Mutex::new(HashMap::new()),
        queue: tx,
        queue_capacity: capacity,
        resolver,
        encoders,
        backend_name: backend.name().to_string(),
    }));
    let worker_state = Arc::downgrade(&state.0);
    let output_dir = config.output_dir.clone();
    std::thread::Builder::new()
        .name("generation-worker".into())
        .spawn(move || worker(rx, worker_state, backend, output_dir))
        .expect("spawning the generation worker");
    router(state, config.static_dir.as_deref())
}

fn router(state: AppState, static_dir: Option<&std::path::Path>) -> Router {
    let api = Router::new()
        .route("/generate", post(submit))
        .route("/jobs/{id}", get(job))
        .route("/assets/{id}", get(asset))
        .route("/encoders", get(encoders))
        .route("/defaults", get(defaults))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { not_found("no such route") }),
    }
}

fn worker(
    mut rx: mpsc::Receiver<String>,
    state: std::sync::Weak<Shared>,
    backend: Arc<dyn DiffusionBackend>,
    output_dir: Option<PathBuf>,
) {
    while let Some(id) = rx.blocking_recv() {
        let Some(shared) = state.upgrade() else {
            return;
        };
        let Some(request) = shared.jobs.start(&id) else {
            continue;
        };
        tracing::info!(job = %id, mode = %request.mode(), "job started");
        let result = generate(backend.as_ref(), &shared.resolver, &request, &mut |p| {
            shared.jobs.set_progress(&id, p.fraction())
        });
        let images = match result {
            Ok(images) => images,
            Err(e) => {
                tracing::warn!(job = %id, error = %e, "job failed");
                shared.jobs.fail(&id, e.to_string());
                continue;
            }
        };
        if let Some(dir) = &output_dir {
            if let Err(e) = write_outputs(&dir.join(&id), backend.name(), &request, &images) {
                shared.jobs.fail(&id, e.to_string());
                continue;
            }
        }
        let mut ids = Vec::with_capacity(images.len());
        {
            let mut assets = shared.assets.lock().unwrap_or_else(|p| p.into_inner());
            for image in &images {
                let asset_id = uuid::Uuid::new_v4().simple().to_string();
                assets.insert(asset_id.clone(), Bytes::from(encode_png(&image.image)));
                ids.push(asset_id);
            }
        }
        tracing::info!(job = %id, assets = ids.len(), "job done");
        shared.jobs.finish(&id, ids);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub schema_version: u32,
    pub error: ApiErrorBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

fn error_response(
    status: StatusCode,
    code: &str,
    message: &str,
    fields: Vec<FieldError>,
) -> Response {
    let body = ApiError {
        schema_version: API_SCHEMA_VERSION,
        error: ApiErrorBody {
            code: code.into(),
            message: message.into(),
            fields,
        },
    };
    (status, Json(body)).into_response()
}

fn not_found(message: &str) -> Response {
    error_response(StatusCode::NOT_FOUND, "not_found", message, Vec::new())
}

/// Field errors for server-local paths, which the service never reads.
fn path_inputs(request: &GenerationRequest) -> Vec<FieldError> {
    let mut fields = Vec::new();
    for (i, source) in request.guidance_sources.iter().enumerate() {
        if let Payload::Audio(input) = &source.payload {
            if input.path.is_some() {
                fields.push(FieldError {
                    field: format!("guidance_sources[{i}].payload.path"),
                    message: "the service accepts inline base64 media only".into(),
                });
            }
        }
    }
    if request
        .init_image
        .as_ref()
        .is_some_and(|m| m.path.is_some())
    {
        fields.push(FieldError {
            field: "init_image.path".into(),
            message: "the service accepts inline base64 media only".into(),
        });
    }
    fields
}

async fn submit(State(app): State<AppState>, body: Bytes) -> Response {
    let request: GenerationRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                "invalid_request",
                "request body is not a valid generation request",
                vec![FieldError {
                    field: "body".into(),
                    message: e.to_string(),
                }],
            )
        }
    };
    let mut fields = Vec::new();
    if let Err(e) = request.validate() {
        fields.extend(e.0);
    }
    if let Err(e) = app.0.resolver.check(&request) {
        fields.extend(e.0);
    }
    fields.extend(path_inputs(&request));
    if !fields.is_empty() {
        return error_response(
            StatusCode::BAD_REQUEST,
            "invalid_request",
            "request has invalid fields",
            fields,
        );
    }
    let status = app.0.jobs.insert(request);
    match app.0.queue.try_send(status.job_id.clone()) {
        Ok(()) => (StatusCode::ACCEPTED, Json(status)).into_response(),
        Err(_) => {
            app.0.jobs.remove(&status.job_id);
            error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                "busy",
                "the generation queue is full; retry later",
                Vec::new(),
            )
        }
    }
}

async fn job(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.0.jobs.get(&id) {
        Some(status) => Json(status).into_response(),
        None => not_found("unknown job"),
    }
}

async fn asset(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    let bytes = app
        .0
        .assets
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .get(&id)
        .cloned();
    match bytes {
        Some(b) => ([(header::CONTENT_TYPE, "image/png")], b).into_response(),
        None => not_found("unknown asset"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodersResponse {
    pub schema_version: u32,
    pub text_encoder: bool,
    pub encoders: Vec<EncoderSummary>,
}

async fn encoders(State(app): State<AppState>) -> Json<EncodersResponse> {
    Json(EncodersResponse {
        schema_version: API_SCHEMA_VERSION,
        text_encoder: app.0.resolver.has_text_encoder(),
        encoders: app.0.encoders.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultsResponse {
    pub schema_version: u32,
    #[serde(flatten)]
    pub defaults: GenerationDefaults,
    pub audio_encoders: Vec<String>,
    pub queue_capacity: usize,
}

async fn defaults(State(app): State<AppState>) -> Json<DefaultsResponse> {
    Json(DefaultsResponse {
        schema_version: API_SCHEMA_VERSION,
        defaults: GenerationDefaults::default(),
        audio_encoders: app
            .0
            .resolver
            .audio_encoder_ids()
            .map(String::from)
            .collect(),
        queue_capacity: app.0.queue_capacity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub schema_version: u32,
    pub status: String,
    pub backend: String,
    pub queued: usize,
    pub queue_capacity: usize,
}

async fn health(State(app): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        schema_version: API_SCHEMA_VERSION,
        status: "ok".into(),
        backend: app.0.backend_name.clone(),
        queued: app.0.queue_capacity - app.0.queue.capacity(),
        queue_capacity: app.0.queue_capacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use trio_core::diffusion::GuidanceSource;

    #[test]
    fn transitions_only_move_forward() {
        use JobState::*;
        assert!(Queued.can_advance_to(Running));
        assert!(Queued.can_advance_to(Failed));
        assert!(Running.can_advance_to(Done));
        assert!(!Running.can_advance_to(Queued));
        assert!(!Done.can_advance_to(Failed));
        assert!(!Failed.can_advance_to(Running));

        let jobs = JobRegistry::default();
        let id = jobs
            .insert(GenerationRequest::text_to_image(
                vec![GuidanceSource::random(1)],
                0,
            ))
            .job_id;
        assert!(jobs.start(&id).is_some());
        jobs.set_progress(&id, 0.5);
        jobs.set_progress(&id, 0.25);
        assert_eq!(jobs.get(&id).unwrap().progress, 0.5);
        jobs.finish(&id, vec!["a".into()]);
        jobs.fail(&id, "late".into());
        let s = jobs.get(&id).unwrap();
        assert_eq!((s.state, s.progress, s.error), (JobState::Done, 1.0, None));
        assert!(jobs.start(&id).is_none());
    }
}
