//! HTTP facade over the restoration engine.
//!
//! | method | path                       | purpose                                   |
//! |--------|----------------------------|-------------------------------------------|
//! | POST   | `/api/jobs`                | submit a job, `201` with its status       |
//! | GET    | `/api/jobs`                | list jobs                                 |
//! | GET    | `/api/jobs/{id}`           | status: state, step, latest metrics, α    |
//! | GET    | `/api/jobs/{id}/frame`     | `?step=&layer=&format=png\|ct2`            |
//! | POST   | `/api/jobs/{id}/control`   | `{"new_lambda", "action"}`                |
//! | GET    | `/api/jobs/{id}/events`    | server-sent step notifications            |
//!
//! Errors are `{"error": message, "key": key or null}`. Jobs live in memory
//! and their run directories under `{data}/jobs/{id}`; a restart forgets
//! jobs and does not resume them.

pub mod api;
pub mod job;

use std::collections::HashMap;
use std::convert::Infallible;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dlsteer_core::io::decode_ct2;
use dlsteer_core::Error;
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use api::{Action, ApiError, ControlRequest, JobRequest};
use job::{Control, Job};

pub const DEFAULT_JOBS_MAX: usize = 4;
const CONTROL_TIMEOUT: Duration = Duration::from_secs(30);
const EVENT_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Cap on jobs that are not yet done or failed.
    pub jobs_max: usize,
    /// Built UI bundle, served for every non-API path.
    pub static_dir: Option<PathBuf>,
    /// Default pause after each step; jobs may override it.
    pub min_step_millis: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), jobs_max: DEFAULT_JOBS_MAX, static_dir: None, min_step_millis: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    cfg: ServiceConfig,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        Self { inner: Arc::new(Inner { cfg, jobs: RwLock::new(HashMap::new()) }) }
    }

    pub fn job(&self, id: &str) -> Option<Arc<Job>> {
        self.inner.jobs.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    fn find(&self, id: &str) -> Result<Arc<Job>, ApiError> {
        self.job(id).ok_or_else(|| ApiError::not_found(format!("no job {id:?}")))
    }
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.inner.cfg.static_dir.clone();
    let api = Router::new()
        .route("/api/jobs", post(create_job).get(list_jobs))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/frame", get(frame))
        .route("/api/jobs/{id}/control", post(control))
        .route("/api/jobs/{id}/events", get(events))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, cfg: ServiceConfig) -> io::Result<()> {
    std::fs::create_dir_all(cfg.data_dir.join("jobs"))?;
    axum::serve(listener, router(AppState::new(cfg))).await
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn create_job(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req = JobRequest::parse(&body)?;
    let cfg = req.run_config()?;
    let obs = req.observation()?;
    let pacing = Duration::from_millis(req.min_step_millis.unwrap_or(state.inner.cfg.min_step_millis));

    let mut jobs = state.inner.jobs.write().unwrap_or_else(|p| p.into_inner());
    let active = jobs.values().filter(|j| j.progress().state.is_active()).count();
    if active >= state.inner.cfg.jobs_max {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            format!("{active} jobs active, limit is {}", state.inner.cfg.jobs_max),
        ));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let dir = state.inner.cfg.data_dir.join("jobs").join(&id);
    let prepared = job::prepare(id.clone(), dir, obs, &cfg, pacing).map_err(|e| match e {
        Error::Io(e) => internal(e),
        other => ApiError::from_engine(other, "config"),
    })?;
    let status = prepared.job().status_json();
    let job = prepared.start().map_err(internal)?;
    jobs.insert(id, job);
    Ok((StatusCode::CREATED, Json(status)).into_response())
}

async fn list_jobs(State(state): State<AppState>) -> Json<serde_json::Value> {
    let jobs = state.inner.jobs.read().unwrap_or_else(|p| p.into_inner());
    let mut list: Vec<_> = jobs
        .values()
        .map(|j| {
            let p = j.progress();
            json!({"id": j.id, "state": p.state, "current_step": p.current_step})
        })
        .collect();
    list.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
    Json(json!(list))
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(state.find(&id)?.status_json()))
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    step: Option<usize>,
    layer: Option<String>,
    format: Option<String>,
}

/// File name of a layer inside a step directory; `input` lives at the root.
fn layer_file(layer: &str) -> Option<&'static str> {
    match layer {
        "restored" => Some("zstar.ct2"),
        "alpha" => Some("alpha.ct2"),
        "reliability" => Some("r.ct2"),
        "uncertainty" => Some("u.ct2"),
        "input" => Some("input.ct2"),
        _ => None,
    }
}

/// 8-bit grayscale PNG, linearly scaled from `[min, max]` to `[0, 255]`.
pub fn encode_png(t: &dlsteer_core::Tensor2D) -> Result<(Vec<u8>, f64, f64), image::ImageError> {
    let (lo, hi) = (t.min(), t.max());
    let span = hi - lo;
    let pixels: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &pixels,
        t.width() as u32,
        t.height() as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok((out, lo, hi))
}

fn header_value(v: impl ToString) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).expect("numeric header")
}

async fn frame(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<FrameQuery>,
) -> Result<Response, ApiError> {
    let job = state.find(&id)?;
    let layer = q.layer.as_deref().unwrap_or("restored");
    let file = layer_file(layer).ok_or_else(|| ApiError::keyed("layer", format!("unknown layer {layer:?}")))?;
    let format = q.format.as_deref().unwrap_or("png");
    if format != "png" && format != "ct2" {
        return Err(ApiError::keyed("format", format!("unknown format {format:?}")));
    }
    let recorded = job.progress().recorded;
    let step = q.step.unwrap_or_else(|| *recorded.last().unwrap_or(&0));
    if !recorded.contains(&step) {
        return Err(ApiError::not_found(format!("step {step} not recorded")));
    }
    let path = if layer == "input" {
        job.dir.join(file)
    } else {
        dlsteer_core::engine::step_dir(&job.dir, step).join(file)
    };
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ApiError::not_found(format!("no {layer} layer at step {step}")))
        }
        Err(e) => return Err(internal(e)),
    };
    let mut resp = if format == "ct2" {
        let mut r = bytes.into_response();
        r.headers_mut()
            .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
        r
    } else {
        let t = decode_ct2(&bytes).map_err(internal)?;
        let (png, lo, hi) = encode_png(&t).map_err(internal)?;
        let mut r = png.into_response();
        let h = r.headers_mut();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
        h.insert("x-scale-min", header_value(format!("{lo:?}")));
        h.insert("x-scale-max", header_value(format!("{hi:?}")));
        r
    };
    resp.headers_mut().insert("x-step", header_value(step));
    resp.headers_mut().insert("x-layer", header_value(layer));
    Ok(resp)
}

async fn ask<T>(job: &Job, make: impl FnOnce(oneshot::Sender<T>) -> Control) -> Result<T, ApiError> {
    let finished = || ApiError::new(StatusCode::CONFLICT, "job already finished");
    let (tx, rx) = oneshot::channel();
    if !job.send(make(tx)) {
        return Err(finished());
    }
    match tokio::time::timeout(CONTROL_TIMEOUT, rx).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(_)) => Err(finished()),
        Err(_) => Err(internal("job did not answer")),
    }
}

async fn control(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req = ControlRequest::parse(&body)?;
    let job = state.find(&id)?;
    let current = job.progress().state;
    if !current.is_active() {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("job is {current:?}").to_lowercase()));
    }
    let mut effective = None;
    if let Some(lambda) = req.new_lambda {
        effective = Some(ask(&job, |tx| Control::Steer(lambda, tx)).await?);
    }
    match req.action {
        Some(Action::Pause) => ask(&job, Control::Pause).await?,
        Some(Action::Resume) => ask(&job, Control::Resume).await?,
        Some(Action::Finalize) => ask(&job, Control::Finalize).await?,
        None => {}
    }
    let p = job.progress();
    Ok(Json(json!({
        "accepted": true,
        "effective_from_step": effective,
        "state": p.state,
        "current_step": p.current_step,
    }))
    .into_response())
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let job = state.find(&id)?;
    let stream = futures::stream::unfold((job, None, false), |(job, last, ended)| async move {
        if ended {
            return None;
        }
        loop {
            let p = job.progress();
            let key = (p.current_step, p.state);
            if last != Some(key) {
                let event = Event::default()
                    .event("step")
                    .json_data(json!({"step": p.current_step, "state": p.state}))
                    .expect("json event");
                let done = !p.state.is_active();
                return Some((Ok(event), (job, Some(key), done)));
            }
            tokio::time::sleep(EVENT_POLL).await;
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
