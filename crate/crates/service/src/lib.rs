//! HTTP session service for interactive trajectory-guided sampling.
//!
//! A session holds one run config. Clients replace its trajectories between
//! runs and start runs that stream one `step` event per diffusion step
//! followed by a terminal `done` or `failed` event over SSE.

pub mod events;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use indexmap::IndexMap;
use tokio::sync::{mpsc, Semaphore};
use tokio_stream::wrappers::ReceiverStream;
use tokio_stream::StreamExt;

use trajguide_core::energy::EnergyBreakdown;
use trajguide_core::formats::artifacts::{encode_png, mask_png, write_run_artifacts};
use trajguide_core::formats::config::{parse_run_config, parse_trajectories};
use trajguide_core::formats::{RunConfig, RunMetrics};
use trajguide_core::geometry::rasterize_polyline;
use trajguide_core::guidance::{check_trajectories, guided_sample_with, StepView};
use trajguide_core::render::{render_scene, Render, RENDER_SCALE};
use trajguide_core::vocab::{FIRST_OBJECT, VOCAB};
use trajguide_core::{embed_tokens, Error, ErrorClass, SampleResult, SandboxModel};

pub use events::*;

pub const DEFAULT_MAX_SESSIONS: usize = 64;
pub const PREVIEW_EVERY: usize = 5;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    /// Runs allowed to sample at the same time; the rest queue.
    pub run_slots: usize,
    /// Capacity of each run's event queue.
    pub queue_capacity: usize,
    /// Where run directories go; `None` keeps results in memory only.
    pub artifact_root: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_sessions: DEFAULT_MAX_SESSIONS,
            run_slots: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue_capacity: 32,
            artifact_root: None,
        }
    }
}

struct Session {
    id: String,
    config: RunConfig,
    state: SessionState,
    revision: u64,
    runs: u64,
    result: Option<RunSummary>,
    last_error: Option<FailedEvent>,
}

type SessionRef = Arc<Mutex<Session>>;

struct Inner {
    cfg: ServiceConfig,
    /// Insertion order doubles as recency order: touched sessions move to
    /// the back, eviction takes from the front.
    sessions: Mutex<IndexMap<String, SessionRef>>,
    slots: Arc<Semaphore>,
    counter: AtomicU64,
    salt: u64,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        let slots = Arc::new(Semaphore::new(cfg.run_slots.max(1)));
        Self {
            inner: Arc::new(Inner {
                cfg,
                sessions: Mutex::new(IndexMap::new()),
                slots,
                counter: AtomicU64::new(0),
                salt: rand::random(),
            }),
        }
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().unwrap().len()
    }

    fn lookup(&self, id: &str) -> Option<SessionRef> {
        let mut map = self.inner.sessions.lock().unwrap();
        let s = map.shift_remove(id)?;
        map.insert(id.to_string(), s.clone());
        Some(s)
    }

    fn insert(&self, config: RunConfig) -> Option<String> {
        let n = self.inner.counter.fetch_add(1, Ordering::Relaxed);
        let id = format!("{:016x}{:04x}", self.inner.salt ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15), n & 0xffff);
        let mut map = self.inner.sessions.lock().unwrap();
        while map.len() >= self.inner.cfg.max_sessions.max(1) {
            let idle = map
                .iter()
                .position(|(_, s)| s.lock().unwrap().state != SessionState::Running)?;
            map.shift_remove_index(idle);
        }
        let session = Session {
            id: id.clone(),
            config,
            state: SessionState::Idle,
            revision: 0,
            runs: 0,
            result: None,
            last_error: None,
        };
        map.insert(id.clone(), Arc::new(Mutex::new(session)));
        Some(id)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/vocab", get(vocab))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/trajectories", put(set_trajectories))
        .route("/sessions/:id/run", post(run))
        .route("/sessions/:id/result", get(get_result))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cfg))).await
}

fn error_response(status: StatusCode, error: &str, message: impl Into<String>, field: Option<String>) -> Response {
    let body = ErrorBody {
        error: error.to_string(),
        message: message.into(),
        field,
    };
    (status, Json(body)).into_response()
}

fn not_found(id: &str) -> Response {
    error_response(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"), None)
}

fn conflict(message: &str) -> Response {
    error_response(StatusCode::CONFLICT, "conflict", message, None)
}

/// Top-level config field an error refers to.
fn field_of(e: &Error) -> Option<String> {
    match e {
        Error::TokenOutOfRange { .. } | Error::MalformedTrajectory(_) => Some("trajectories".into()),
        Error::UnknownSchema(_) => Some("schema_version".into()),
        Error::EmptyPrompt => Some("prompt".into()),
        Error::InvalidDims { .. } => Some("model".into()),
        Error::InvalidConfig(m) => {
            let head = m.split(':').next().unwrap_or_default();
            ["model", "guidance", "prompt", "suite", "output_dir", "schema_version"]
                .contains(&head)
                .then(|| head.to_string())
        }
        _ => None,
    }
}

fn bad_request(e: &Error) -> Response {
    error_response(StatusCode::BAD_REQUEST, e.code(), e.to_string(), field_of(e))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn vocab() -> Json<VocabInfo> {
    let grid = trajguide_core::ModelConfig::default().dims();
    Json(VocabInfo {
        words: VOCAB.iter().map(|w| w.to_string()).collect(),
        first_object: FIRST_OBJECT,
        grid,
        render_scale: RENDER_SCALE,
    })
}

async fn create_session(State(state): State<AppState>, body: String) -> Response {
    let config = match parse_run_config(&body) {
        Ok(c) => c,
        Err(e) => return bad_request(&e),
    };
    let grid = config.model.dims();
    match state.insert(config) {
        Some(session_id) => (
            StatusCode::CREATED,
            Json(CreatedSession {
                session_id,
                revision: 0,
                grid,
                render_scale: RENDER_SCALE,
            }),
        )
            .into_response(),
        None => error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            "session_limit",
            "every session slot holds a running session",
            None,
        ),
    }
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(session) = state.lookup(&id) else {
        return not_found(&id);
    };
    let s = session.lock().unwrap();
    Json(SessionInfo {
        session_id: s.id.clone(),
        state: s.state,
        revision: s.revision,
        config: s.config.clone(),
        has_result: s.result.is_some(),
        last_error: s.last_error.clone(),
    })
    .into_response()
}

async fn set_trajectories(State(state): State<AppState>, Path(id): Path<String>, body: String) -> Response {
    let Some(session) = state.lookup(&id) else {
        return not_found(&id);
    };
    let mut s = session.lock().unwrap();
    if s.state == SessionState::Running {
        return conflict("session is running");
    }
    let value: serde_json::Value = match serde_json::from_str(&body) {
        Ok(v) => v,
        Err(e) => return bad_request(&Error::MalformedTrajectory(e.to_string())),
    };
    let trajectories = match parse_trajectories(&value)
        .and_then(|t| check_trajectories(&t, s.config.prompt.len()).map(|_| t))
    {
        Ok(t) => t,
        Err(e) => return bad_request(&e),
    };
    let grid = s.config.model.dims();
    let mut cells = Vec::with_capacity(trajectories.len());
    for t in &trajectories {
        match rasterize_polyline(t, grid) {
            Ok(set) => cells.push(EchoedCells {
                token_index: t.token_index,
                cells: set.iter().map(|(r, c)| [r, c]).collect(),
            }),
            Err(e) => return bad_request(&e),
        }
    }
    s.config.trajectories = trajectories;
    s.revision += 1;
    s.state = SessionState::Idle;
    Json(TrajectoriesSet {
        revision: s.revision,
        grid,
        cells,
    })
    .into_response()
}

async fn get_result(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(session) = state.lookup(&id) else {
        return not_found(&id);
    };
    let s = session.lock().unwrap();
    match (&s.result, s.state) {
        (_, SessionState::Running) => conflict("session is running"),
        (Some(summary), st) => Json(ResultBody {
            state: st,
            summary: summary.clone(),
        })
        .into_response(),
        (None, _) => conflict("no finished run yet"),
    }
}

enum Outgoing {
    Step(Box<StepEvent>),
    Done(Box<DoneEvent>),
    Failed(FailedEvent),
}

impl Outgoing {
    fn into_event(self) -> Event {
        let (name, data) = match self {
            Outgoing::Step(e) => ("step", serde_json::to_string(&e)),
            Outgoing::Done(e) => ("done", serde_json::to_string(&e)),
            Outgoing::Failed(e) => ("failed", serde_json::to_string(&e)),
        };
        Event::default().event(name).data(data.expect("event serializes"))
    }
}

async fn run(State(state): State<AppState>, Path(id): Path<String>, body: String) -> Response {
    let Some(session) = state.lookup(&id) else {
        return not_found(&id);
    };
    let overrides: RunOverrides = if body.trim().is_empty() {
        RunOverrides::default()
    } else {
        match serde_json::from_str(&body) {
            Ok(o) => o,
            Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_config", e.to_string(), None),
        }
    };
    let (config, revision, run_index) = {
        let mut s = session.lock().unwrap();
        if s.state == SessionState::Running {
            return conflict("a run is already in flight");
        }
        let mut config = s.config.clone();
        let g = &mut config.guidance;
        g.lambda = overrides.lambda.unwrap_or(g.lambda);
        g.eta = overrides.eta.unwrap_or(g.eta);
        g.mode = overrides.mode.unwrap_or(g.mode);
        g.seed = overrides.seed.unwrap_or(g.seed);
        if let Err(e) = config.guidance.validate() {
            return bad_request(&e);
        }
        s.state = SessionState::Running;
        s.runs += 1;
        (config, s.revision, s.runs)
    };

    let capacity = state.inner.cfg.queue_capacity.max(2);
    let (tx, rx) = mpsc::channel(capacity);
    let slots = state.inner.slots.clone();
    let artifact_dir = state
        .inner
        .cfg
        .artifact_root
        .as_ref()
        .map(|root| root.join(&id).join(format!("run-{run_index}")));
    tokio::spawn(async move {
        let _permit = slots.acquire_owned().await.expect("semaphore open");
        let worker_session = session.clone();
        let worker_tx = tx.clone();
        let joined = tokio::task::spawn_blocking(move || {
            run_worker(&worker_session, config, revision, artifact_dir, worker_tx, capacity)
        })
        .await;
        if joined.is_err() {
            let failed = FailedEvent {
                error: "worker_panicked".into(),
                class: "runtime".into(),
                message: "sampling worker panicked".into(),
            };
            {
                let mut s = session.lock().unwrap();
                s.state = SessionState::Failed;
                s.last_error = Some(failed.clone());
            }
            let _ = tx.send(Outgoing::Failed(failed)).await;
        }
    });

    let stream = ReceiverStream::new(rx).map(|o| Ok::<_, Infallible>(o.into_event()));
    (StatusCode::ACCEPTED, Sse::new(stream).keep_alive(KeepAlive::default())).into_response()
}

fn energy_summary(e: &EnergyBreakdown) -> EnergySummary {
    EnergySummary {
        e_control: e.e_control,
        e_movement: e.e_movement,
        e_total: e.e_total,
    }
}

fn png_b64(png: Vec<u8>) -> String {
    BASE64.encode(png)
}

fn render_png(render: &Render) -> trajguide_core::Result<String> {
    let img = &render.image;
    Ok(png_b64(encode_png(img.dims, &img.to_gray8())?))
}

/// Finest-layer attention columns of the constrained tokens, scaled by the
/// frame's maximum.
fn heatmaps(view: &StepView<'_>, constrained: &[usize]) -> Vec<Heatmap> {
    let Some(last) = view.attention.last() else {
        return Vec::new();
    };
    let map = last.upsampled(view.model.dims());
    let peak = constrained
        .iter()
        .flat_map(|&t| map.column(t).to_vec())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    constrained
        .iter()
        .filter_map(|&t| {
            let gray: Vec<u8> = map
                .column(t)
                .iter()
                .map(|&a| ((a / peak).clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            encode_png(map.dims, &gray).ok().map(|png| Heatmap {
                token_index: t,
                png_base64: png_b64(png),
            })
        })
        .collect()
}

fn step_event(view: &StepView<'_>, constrained: &[usize], preview: bool) -> StepEvent {
    let r = view.record;
    let preview_png_base64 = if preview {
        render_scene(view.model, view.latent, view.tokens)
            .and_then(|render| render_png(&render))
            .ok()
    } else {
        None
    };
    StepEvent {
        step: r.step,
        timestep: r.timestep,
        sigma: r.sigma,
        guided: r.guided,
        updates: r.updates,
        energy: r.energy.as_ref().map(energy_summary),
        overshoots: r.overshoots,
        latent_norm: r.latent_norm,
        events: r.events.clone(),
        heatmaps: heatmaps(view, constrained),
        preview_png_base64,
    }
}

fn sample(
    config: &RunConfig,
    tx: &mpsc::Sender<Outgoing>,
    capacity: usize,
) -> trajguide_core::Result<SampleResult> {
    let model = SandboxModel::new(config.model)?;
    let tokens = embed_tokens(&config.prompt, config.model.d_k, config.model.seed)?;
    let constrained: Vec<usize> = config.trajectories.iter().map(|t| t.token_index).collect();
    guided_sample_with(&model, &tokens, &config.trajectories, &config.guidance, |view| {
        // Previews are optional: skip them when the client is falling
        // behind so step events are never held up.
        let due = (view.record.step + 1) % PREVIEW_EVERY == 0;
        let preview = due && tx.capacity() > capacity / 2;
        let event = step_event(&view, &constrained, preview);
        // A closed channel means the client left; the run still finishes
        // so its result can be fetched.
        let _ = tx.blocking_send(Outgoing::Step(Box::new(event)));
    })
}

fn run_worker(
    session: &SessionRef,
    config: RunConfig,
    revision: u64,
    artifact_dir: Option<PathBuf>,
    tx: mpsc::Sender<Outgoing>,
    capacity: usize,
) {
    let outcome = sample(&config, &tx, capacity).and_then(|result| {
        let (dir, files) = match &artifact_dir {
            Some(dir) => {
                let manifest = write_run_artifacts(&result, dir, false)?;
                (
                    Some(dir.display().to_string()),
                    manifest.files.into_iter().map(|e| e.file).collect(),
                )
            }
            None => (None, Vec::new()),
        };
        let done = DoneEvent {
            revision,
            steps: result.steps.len(),
            dtl: result.dtl(),
            instances: result.metrics.as_ref().map(|m| m.instances.clone()).unwrap_or_default(),
            image_png_base64: render_png(&result.render)?,
            masks_png_base64: result
                .render
                .masks
                .iter()
                .map(|m| mask_png(&m.cells).map(png_b64))
                .collect::<trajguide_core::Result<_>>()?,
            notes: result.notes.clone(),
        };
        let summary = RunSummary {
            revision,
            guidance: result.config.clone(),
            metrics: RunMetrics::from_result(&result),
            energies: result.steps.iter().map(|s| s.energy.as_ref().map(energy_summary)).collect(),
            artifact_dir: dir,
            artifacts: files,
        };
        Ok((done, summary))
    });
    let message = match outcome {
        Ok((done, summary)) => {
            let mut s = session.lock().unwrap();
            s.state = SessionState::Done;
            s.result = Some(summary);
            s.last_error = None;
            drop(s);
            Outgoing::Done(Box::new(done))
        }
        Err(e) => {
            let failed = FailedEvent {
                error: e.code().to_string(),
                class: match e.class() {
                    ErrorClass::Config => "config",
                    ErrorClass::Runtime => "runtime",
                    ErrorClass::Io => "io",
                }
                .to_string(),
                message: e.to_string(),
            };
            let mut s = session.lock().unwrap();
            s.state = SessionState::Failed;
            s.last_error = Some(failed.clone());
            drop(s);
            Outgoing::Failed(failed)
        }
    };
    let _ = tx.blocking_send(message);
}
