//! HTTP API exercised in-process through the router.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use candle_core::{Device, Tensor};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

use trio_cli::registry;
use trio_cli::service::{
    self, ApiError, DefaultsResponse, EncodersResponse, HealthResponse, JobState, JobStatus,
    ServiceConfig, API_SCHEMA_VERSION,
};
use trio_core::clip::SurrogateClip;
use trio_core::dataset::{encode_wav, synth_audio};
use trio_core::diffusion::{
    DiffusionBackend, DiffusionError, GenerationRequest, GuidanceResolver, GuidanceSource,
    MediaInput, ToyBackend,
};
use trio_core::encoders::{
    build_encoder, reference_spec, save_checkpoint, Checkpoint, ProjectionHead,
};

/// Toy backend whose denoiser blocks until the gate opens.
struct GatedBackend {
    inner: ToyBackend,
    gate: Arc<(Mutex<bool>, Condvar)>,
}

impl DiffusionBackend for GatedBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn device(&self) -> &Device {
        self.inner.device()
    }

    fn predict_noise(
        &self,
        latents: &Tensor,
        t: usize,
        context: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        let (open, cv) = &*self.gate;
        let mut open = open.lock().unwrap();
        while !*open {
            open = cv.wait(open).unwrap();
        }
        drop(open);
        self.inner.predict_noise(latents, t, context)
    }

    fn encode_image(&self, image: &image::RgbImage) -> Result<Tensor, DiffusionError> {
        self.inner.encode_image(image)
    }

    fn decode_latents(&self, latents: &Tensor) -> Result<image::RgbImage, DiffusionError> {
        self.inner.decode_latents(latents)
    }
}

struct App {
    router: Router,
    _encoders: tempfile::TempDir,
}

fn app(
    backend: Arc<dyn DiffusionBackend>,
    queue_capacity: usize,
    static_dir: Option<&std::path::Path>,
) -> App {
    let encoders = tempfile::tempdir().unwrap();
    let enc = build_encoder(&reference_spec("tiny").unwrap(), 4).unwrap();
    let head = ProjectionHead::new(4, &Device::Cpu).unwrap();
    let ck = Checkpoint::capture(&enc, &head, 1, Value::Null).unwrap();
    save_checkpoint(&encoders.path().join("tiny.safetensors"), &ck).unwrap();

    let loaded = registry::load_all(Some(encoders.path()), &Device::Cpu).unwrap();
    let mut resolver = GuidanceResolver::new(Some(Arc::new(SurrogateClip::new())));
    let mut summaries = Vec::new();
    for l in loaded {
        resolver.insert_audio_encoder(l.summary.id.clone(), l.encoder);
        summaries.push(l.summary);
    }
    let config = ServiceConfig {
        queue_capacity,
        output_dir: None,
        static_dir: static_dir.map(Into::into),
    };
    App {
        router: service::start(backend, resolver, summaries, config),
        _encoders: encoders,
    }
}

async fn send(router: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

async fn get<T: DeserializeOwned>(router: &Router, uri: &str) -> (StatusCode, T) {
    let req = Request::get(uri).body(Body::empty()).unwrap();
    let (status, body) = send(router, req).await;
    (status, serde_json::from_slice(&body).expect("a JSON body"))
}

async fn post<T: DeserializeOwned>(router: &Router, body: Value) -> (StatusCode, T) {
    let req = Request::post("/generate")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, body) = send(router, req).await;
    (status, serde_json::from_slice(&body).expect("a JSON body"))
}

fn audio_request(steps: usize) -> Value {
    let wav = MediaInput::from_bytes(&encode_wav(&synth_audio(9, 0)));
    let mut r = GenerationRequest::text_to_image(vec![GuidanceSource::audio("tiny", wav)], 3);
    r.steps = steps;
    serde_json::to_value(r).unwrap()
}

/// Polls until the job is terminal; returns every observed state in order.
async fn wait(router: &Router, id: &str) -> (JobStatus, Vec<JobState>) {
    let mut seen = Vec::new();
    for _ in 0..600 {
        let (code, status): (_, JobStatus) = get(router, &format!("/jobs/{id}")).await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(status.schema_version, API_SCHEMA_VERSION);
        assert!((0.0..=1.0).contains(&status.progress));
        seen.push(status.state);
        if status.state.is_terminal() {
            return (status, seen);
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

fn assert_forward_only(states: &[JobState]) {
    for pair in states.windows(2) {
        assert!(
            pair[0] == pair[1] || pair[0].can_advance_to(pair[1]),
            "state moved backwards: {states:?}"
        );
    }
}

#[tokio::test]
async fn discovery_endpoints_describe_the_service() {
    let app = app(Arc::new(ToyBackend::new()), 4, None);

    let (code, health): (_, HealthResponse) = get(&app.router, "/health").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(health.schema_version, API_SCHEMA_VERSION);
    assert_eq!((health.queued, health.queue_capacity), (0, 4));

    let (_, encoders): (_, EncodersResponse) = get(&app.router, "/encoders").await;
    assert_eq!(encoders.schema_version, API_SCHEMA_VERSION);
    assert!(encoders.text_encoder);
    assert_eq!(encoders.encoders.len(), 1);
    let tiny = &encoders.encoders[0];
    assert_eq!(
        (tiny.id.as_str(), tiny.architecture.as_str(), tiny.epoch),
        ("tiny", "tiny", 1)
    );
    assert!(tiny.census.trainable_parameters > 0);

    let (_, defaults): (_, DefaultsResponse) = get(&app.router, "/defaults").await;
    assert_eq!(defaults.schema_version, API_SCHEMA_VERSION);
    assert_eq!(defaults.audio_encoders, ["tiny"]);
    assert_eq!(defaults.queue_capacity, 4);
    assert!(defaults.defaults.text_to_image.steps > 0);
    assert!(defaults.defaults.image_to_image.strength.is_some());

    let (code, err): (_, ApiError) = get(&app.router, "/nowhere").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(err.schema_version, API_SCHEMA_VERSION);
}

#[tokio::test]
async fn invalid_requests_name_the_offending_field() {
    let app = app(Arc::new(ToyBackend::new()), 4, None);

    let (code, err): (_, ApiError) = post(&app.router, audio_request(0)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(err.schema_version, API_SCHEMA_VERSION);
    assert_eq!(err.error.code, "invalid_request");
    assert!(
        err.error.fields.iter().any(|f| f.field == "steps"),
        "{err:?}"
    );

    let mut by_path = audio_request(4);
    by_path["guidance_sources"][0]["payload"] = json!({ "type": "audio", "path": "/etc/passwd" });
    let (code, err): (_, ApiError) = post(&app.router, by_path).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(err
        .error
        .fields
        .iter()
        .any(|f| f.field == "guidance_sources[0].payload.path"));

    let mut unknown = audio_request(4);
    unknown["guidance_sources"][0]["encoder_id"] = json!("nope");
    let (code, _): (_, ApiError) = post(&app.router, unknown).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);

    let (code, err): (_, ApiError) = post(&app.router, json!({ "steps": "many" })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(err.error.fields[0].field, "body");

    let (code, err): (_, ApiError) = get(&app.router, "/jobs/does-not-exist").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(err.error.code, "not_found");
    let (code, _): (_, ApiError) = get(&app.router, "/assets/does-not-exist").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn audio_job_runs_to_a_png_asset() {
    let app = app(Arc::new(ToyBackend::new()), 4, None);

    let (code, queued): (_, JobStatus) = post(&app.router, audio_request(4)).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    assert_eq!(queued.schema_version, API_SCHEMA_VERSION);
    assert_eq!(queued.state, JobState::Queued);
    assert_eq!(queued.mode, "A");

    let (done, seen) = wait(&app.router, &queued.job_id).await;
    assert_forward_only(&seen);
    assert_eq!(done.state, JobState::Done, "{:?}", done.error);
    assert_eq!(done.progress, 1.0);
    assert_eq!(done.assets.len(), 1);

    let req = Request::get(format!("/assets/{}", done.assets[0]))
        .body(Body::empty())
        .unwrap();
    let resp = app.router.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let png = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (512, 512));
}

#[tokio::test]
async fn full_queue_rejects_with_busy() {
    let gate = Arc::new((Mutex::new(false), Condvar::new()));
    let backend = GatedBackend {
        inner: ToyBackend::new(),
        gate: gate.clone(),
    };
    let app = app(Arc::new(backend), 1, None);

    let (code, first): (_, JobStatus) = post(&app.router, audio_request(2)).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    // the worker takes the first job off the queue and blocks inside it
    let mut seen = vec![first.state];
    loop {
        let (_, s): (_, JobStatus) = get(&app.router, &format!("/jobs/{}", first.job_id)).await;
        seen.push(s.state);
        if s.state == JobState::Running {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    let (code, second): (_, JobStatus) = post(&app.router, audio_request(2)).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let (code, err): (_, ApiError) = post(&app.router, audio_request(2)).await;
    assert_eq!(code, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(err.error.code, "busy");
    let (_, health): (_, HealthResponse) = get(&app.router, "/health").await;
    assert_eq!(health.queued, 1);

    {
        let (open, cv) = &*gate;
        *open.lock().unwrap() = true;
        cv.notify_all();
    }
    let (done, rest) = wait(&app.router, &first.job_id).await;
    seen.extend(rest);
    assert_forward_only(&seen);
    assert_eq!(done.state, JobState::Done);
    let (done, rest) = wait(&app.router, &second.job_id).await;
    assert_forward_only(&rest);
    assert_eq!(done.state, JobState::Done);
}

#[tokio::test]
async fn static_files_are_served_beside_the_api() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>trio</html>").unwrap();
    let app = app(Arc::new(ToyBackend::new()), 2, Some(ui.path()));

    let (code, body) = send(&app.router, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, b"<html>trio</html>");
    let (code, _): (_, HealthResponse) = get(&app.router, "/health").await;
    assert_eq!(code, StatusCode::OK);
}
