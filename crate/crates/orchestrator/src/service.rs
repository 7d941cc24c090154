//! HTTP API under `/v1/`.
//!
//! Every agent session runs on its own thread that owns the [`Agent`].
//! Approvals and rejections reach it through a mailbox and are applied one
//! at a time; handlers read a snapshot taken after each state change. Scans
//! run on their own threads and fill a shared frame as pixels arrive.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use autolab_core::agent::{Agent, AgentConfig, AgentError, AgentSession, Mode, Predicate, SessionState};
use autolab_core::events::{EventHub, EventKind, EventSink, Recv, StreamSink};
use autolab_core::scan::{export_csv, Frame, FrameMeta, ScanPlan};
use autolab_core::transport::Rack;
use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, warn};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio_stream::wrappers::ReceiverStream;

use crate::setup::{acquire, default_predicate, llm_setup, open_agent, LlmChoice};

/// How often an idle event stream checks whether its client went away.
const STREAM_POLL: Duration = Duration::from_millis(250);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub llm: LlmChoice,
    /// Default script for stub sessions that do not bring their own.
    pub stub_script: Option<PathBuf>,
}

enum Action {
    Approve { by: String },
    Reject { by: String, reason: String },
}

struct Command {
    action: Action,
    reply: oneshot::Sender<Result<(), AgentError>>,
}

struct SessionHandle {
    snapshot: Arc<Mutex<AgentSession>>,
    /// Set before `AwaitingApproval` is published, cleared once a decision
    /// is applied. The snapshot lags the event stream by up to one step, so
    /// decisions are gated on this instead.
    parked: Arc<AtomicBool>,
    mailbox: mpsc::Sender<Command>,
}

struct SessionSink {
    inner: StreamSink,
    parked: Arc<AtomicBool>,
}

impl EventSink for SessionSink {
    fn emit(&self, kind: EventKind, payload: Value) {
        if kind == EventKind::AwaitingApproval {
            self.parked.store(true, Ordering::SeqCst);
        }
        self.inner.emit(kind, payload);
    }
}

pub struct AppState {
    hub: Arc<EventHub>,
    rack: Rack,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    scans: Mutex<HashMap<String, Arc<Mutex<Frame>>>>,
}

impl AppState {
    pub fn new(rack: Rack, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            hub: EventHub::new(),
            rack,
            config,
            sessions: Mutex::default(),
            scans: Mutex::default(),
        })
    }

    pub fn hub(&self) -> &Arc<EventHub> {
        &self.hub
    }

    fn knows(&self, id: &str) -> bool {
        self.sessions.lock().unwrap().contains_key(id) || self.scans.lock().unwrap().contains_key(id)
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/rack", get(rack))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/approve", post(approve))
        .route("/v1/sessions/{id}/reject", post(reject))
        .route("/v1/scans", post(create_scan))
        .route("/v1/scans/{id}/frame", get(get_frame))
        .route("/v1/events/{id}", get(events))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Shared) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown id {id}"))
}

async fn rack(State(s): State<Shared>) -> Response {
    Json(s.rack.list_resources()).into_response()
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    goal: String,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    predicate: Option<Predicate>,
    #[serde(default)]
    llm: Option<LlmChoice>,
    /// Inline stub script; overrides `llm`.
    #[serde(default)]
    stub: Option<Value>,
}

async fn create_session(State(s): State<Shared>, Json(req): Json<CreateSession>) -> Response {
    if req.goal.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "goal must not be empty");
    }
    let mode = match req.mode.as_deref().map(str::parse::<Mode>).transpose() {
        Ok(m) => m.unwrap_or_default(),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let llm = match llm_setup(req.llm.unwrap_or(s.config.llm), req.stub.as_ref(), s.config.stub_script.as_deref()) {
        Ok(l) => l,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let predicate = req.predicate.clone().or(llm.predicate).unwrap_or_else(default_predicate);
    let mut config = AgentConfig { mode, model: llm.model, ..AgentConfig::new(req.goal.clone(), predicate) };
    let backend = llm.backend;
    if let Some(n) = req.max_iters {
        config.max_iters = n;
    }
    let id = autolab_core::agent::new_session_id();
    config.id = Some(id.clone());

    let state = s.clone();
    let parked = Arc::new(AtomicBool::new(false));
    let sink = SessionSink { inner: s.hub.sink(&id), parked: parked.clone() };
    let opened = tokio::task::spawn_blocking(move || {
        open_agent(config, state.rack.list_resources(), &state.config.data_dir, backend, state.rack.clock(), Box::new(sink))
    })
    .await
    .expect("session setup panicked");
    let agent = match opened {
        Ok(a) => a,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    let snapshot = Arc::new(Mutex::new(agent.session().clone()));
    let (tx, rx) = mpsc::channel();
    s.sessions.lock().unwrap().insert(id.clone(), SessionHandle { snapshot: snapshot.clone(), parked: parked.clone(), mailbox: tx });
    std::thread::Builder::new()
        .name(format!("session-{id}"))
        .spawn(move || session_worker(agent, snapshot, parked, rx))
        .expect("spawn session thread");
    (StatusCode::CREATED, Json(json!({ "id": id }))).into_response()
}

fn session_worker(mut agent: Agent, snapshot: Arc<Mutex<AgentSession>>, parked: Arc<AtomicBool>, mailbox: mpsc::Receiver<Command>) {
    loop {
        if agent.session().state == SessionState::Running {
            if let Err(e) = agent.step() {
                error!("session {}: {e}", agent.session().id);
                return;
            }
            *snapshot.lock().unwrap() = agent.session().clone();
            continue;
        }
        // parked or finished: serve the mailbox until the service goes away
        let Ok(cmd) = mailbox.recv() else { return };
        let result = match cmd.action {
            Action::Approve { by } => agent.approve(&by),
            Action::Reject { by, reason } => agent.reject(&by, &reason),
        };
        *snapshot.lock().unwrap() = agent.session().clone();
        parked.store(agent.session().state == SessionState::AwaitingApproval, Ordering::SeqCst);
        let _ = cmd.reply.send(result);
    }
}

async fn get_session(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    let sessions = s.sessions.lock().unwrap();
    match sessions.get(&id) {
        Some(h) => Json(h.snapshot.lock().unwrap().clone()).into_response(),
        None => not_found(&id),
    }
}

#[derive(Debug, Default, Deserialize)]
struct ApproveBody {
    #[serde(default)]
    by: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RejectBody {
    reason: String,
    #[serde(default)]
    by: Option<String>,
}

const DEFAULT_OPERATOR: &str = "operator";

async fn decide(s: Shared, id: String, action: Action) -> Response {
    let (reply, answer) = oneshot::channel();
    {
        let sessions = s.sessions.lock().unwrap();
        let Some(h) = sessions.get(&id) else { return not_found(&id) };
        if !h.parked.load(Ordering::SeqCst) {
            return error(StatusCode::CONFLICT, "not awaiting approval");
        }
        if h.mailbox.send(Command { action, reply }).is_err() {
            return error(StatusCode::INTERNAL_SERVER_ERROR, "session worker stopped");
        }
    }
    match answer.await {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(AgentError::Conflict(msg))) => error(StatusCode::CONFLICT, msg),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "session worker stopped"),
    }
}

async fn approve(State(s): State<Shared>, Path(id): Path<String>, body: Option<Json<ApproveBody>>) -> Response {
    let by = body.and_then(|Json(b)| b.by).unwrap_or_else(|| DEFAULT_OPERATOR.into());
    decide(s, id, Action::Approve { by }).await
}

async fn reject(State(s): State<Shared>, Path(id): Path<String>, Json(body): Json<RejectBody>) -> Response {
    let by = body.by.unwrap_or_else(|| DEFAULT_OPERATOR.into());
    decide(s, id, Action::Reject { by, reason: body.reason }).await
}

/// Publishes scan events and mirrors each pixel into the frame served by
/// `GET /scans/{id}/frame`. The frame is updated before the event goes out,
/// so a client reacting to an event never reads an older frame.
struct FrameSink {
    inner: StreamSink,
    frame: Arc<Mutex<Frame>>,
}

impl EventSink for FrameSink {
    fn emit(&self, kind: EventKind, payload: Value) {
        {
            let mut f = self.frame.lock().unwrap();
            match kind {
                EventKind::PixelMeasured => {
                    let at = |k: &str| payload[k].as_u64().map(|v| v as usize);
                    if let (Some(col), Some(row), Some(i)) = (at("col"), at("row"), payload["current_A"].as_f64()) {
                        let nx = f.nx;
                        f.data[row * nx + col] = i;
                        f.acquired += 1;
                    }
                }
                EventKind::ScanFinished => {
                    f.complete = payload["complete"].as_bool().unwrap_or(false);
                    f.abort_reason = payload["abort_reason"].as_str().map(str::to_string);
                }
                _ => {}
            }
        }
        self.inner.emit(kind, payload);
    }
}

#[derive(Debug, Deserialize)]
struct CreateScan {
    #[serde(default)]
    plan: ScanPlan,
}

async fn create_scan(State(s): State<Shared>, Json(req): Json<CreateScan>) -> Response {
    let plan = req.plan;
    if let Err(e) = plan.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let id = autolab_core::agent::new_session_id();
    let meta = FrameMeta { plan: plan.clone(), started_at: String::new(), rack_identity: String::new() };
    let frame = Arc::new(Mutex::new(Frame::empty(meta)));
    s.scans.lock().unwrap().insert(id.clone(), frame.clone());
    let state = s.clone();
    let scan_id = id.clone();
    std::thread::Builder::new()
        .name(format!("scan-{id}"))
        .spawn(move || {
            let sink = FrameSink { inner: state.hub.sink(&scan_id), frame: frame.clone() };
            match acquire(&plan, &state.rack.list_resources(), &state.rack.clock(), &sink) {
                Ok(done) => {
                    persist_frame(&state.config.data_dir, &scan_id, &done);
                    *frame.lock().unwrap() = done;
                }
                Err(e) => {
                    warn!("scan {scan_id}: {e}");
                    // nothing was measured; close the stream so watchers stop waiting
                    sink.emit(EventKind::ScanFinished, json!({ "complete": false, "acquired": 0, "abort_reason": e }));
                }
            }
        })
        .expect("spawn scan thread");
    (StatusCode::CREATED, Json(json!({ "id": id }))).into_response()
}

fn persist_frame(data_dir: &std::path::Path, id: &str, frame: &Frame) {
    let dir = data_dir.join("scans").join(id);
    let written = std::fs::create_dir_all(&dir)
        .and_then(|_| std::fs::write(dir.join("frame.csv"), export_csv(frame)))
        .and_then(|_| std::fs::write(dir.join("frame.json"), serde_json::to_vec_pretty(frame).expect("frame serializes")));
    if let Err(e) = written {
        warn!("cannot save scan {id} under {}: {e}", dir.display());
    }
}

async fn get_frame(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    let frame = s.scans.lock().unwrap().get(&id).cloned();
    match frame {
        Some(f) => Json(f.lock().unwrap().clone()).into_response(),
        None => not_found(&id),
    }
}

#[derive(Debug, Default, Deserialize)]
struct Since {
    #[serde(default)]
    since: u64,
}

/// Line-delimited JSON events, starting with history after `since`. The
/// response ends after the stream's terminal event.
async fn events(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<Since>) -> Response {
    if !s.knows(&id) {
        return not_found(&id);
    }
    let sub = s.hub.subscribe(&id, q.since);
    let (tx, rx) = tokio::sync::mpsc::channel::<Result<String, Infallible>>(64);
    std::thread::spawn(move || loop {
        match sub.recv_timeout(STREAM_POLL) {
            Recv::Event(ev) => {
                let line = serde_json::to_string(&ev).expect("event serializes") + "\n";
                if tx.blocking_send(Ok(line)).is_err() {
                    return;
                }
            }
            Recv::Timeout if tx.is_closed() => return,
            Recv::Timeout => {}
            Recv::Closed => return,
        }
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .body(Body::from_stream(ReceiverStream::new(rx)))
        .expect("static response parts")
}
