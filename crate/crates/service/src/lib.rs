//! HTTP interface to generation sessions.
//!
//! Every session owns an append-only event log. The snapshot served by
//! `GET /sessions/{id}` is a fold over that log, and the event stream replays
//! it from any `Last-Event-ID`.

pub mod config;
pub mod store;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use btforge::backends::Backend;
use btforge::domain::{builtin_domain, render_pddl_like, render_state_triples, DomainSpec, Goal, WorldState};
use btforge::schemes::{
    run_assembly, EventKind, Feedback, FeedbackChannel, FeedbackRequest, Generator, Scheme, SessionObserver,
};
use btforge::sim::{simulate, DEFAULT_TICK_BUDGET};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};

pub use config::{ConfigError, ServiceConfig};
pub use store::{fold, CandidateView, SessionEvent, SessionHandle, SessionMeta, Snapshot, StoreError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", format!("unknown {what} {id:?}"))
    }
    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "INVALID_PAYLOAD", message)
    }
    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "ILLEGAL_STATE", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

struct Entry {
    handle: Arc<SessionHandle>,
    feedback: Mutex<Option<mpsc::Sender<Feedback>>>,
}

pub struct AppState {
    pub config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Entry>>>,
    counter: AtomicU64,
}

impl AppState {
    /// Opens the data directory and loads previously recorded sessions.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, StoreError> {
        let mut sessions = BTreeMap::new();
        for h in store::load_all(&config.data_dir)? {
            sessions.insert(
                h.meta.id.clone(),
                Arc::new(Entry {
                    handle: Arc::new(h),
                    feedback: Mutex::new(None),
                }),
            );
        }
        Ok(Arc::new(AppState {
            config,
            counter: AtomicU64::new(sessions.len() as u64),
            sessions: RwLock::new(sessions),
        }))
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn handle(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.entry(id).ok().map(|e| e.handle.clone())
    }

    fn next_id(&self, scheme: Scheme) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.subsec_nanos()).unwrap_or(0);
        format!("{scheme}-{n:04}-{nanos:08x}")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/sessions/{id}/simulate", post(simulate_candidate))
        .route("/domains/{id}", get(get_domain))
        .with_state(state)
}

/// Binds `config.bind` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let bind = config.bind.clone();
    let state = AppState::open(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    eprintln!("btforge service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    domain: String,
    #[serde(default)]
    subgoal: Option<String>,
    #[serde(default)]
    instruction: Option<String>,
    scheme: String,
    #[serde(default)]
    backend: Option<String>,
    #[serde(default)]
    state: Option<WorldState>,
}

enum Job {
    Subgoal { goal: Goal, domain: DomainSpec },
    Instruction(String),
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(e.to_string()))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let builtin = builtin_domain(&req.domain).map_err(|_| ApiError::not_found("domain", &req.domain))?;
    let scheme: Scheme = req.scheme.parse().map_err(ApiError::invalid)?;
    let profile = req.backend.clone().unwrap_or_else(|| app.config.default_profile.clone());
    let backend_config = app
        .config
        .profiles
        .get(&profile)
        .ok_or_else(|| ApiError::invalid(format!("unknown backend profile {profile:?}")))?;
    let job = match (&req.subgoal, &req.instruction) {
        (Some(g), None) => {
            let goal = Goal::parse(g).map_err(|e| ApiError::invalid(e.to_string()))?;
            builtin.domain.check_goal(&goal).map_err(|e| ApiError::invalid(e.to_string()))?;
            Job::Subgoal {
                goal,
                domain: builtin.domain.clone(),
            }
        }
        (None, Some(text)) => Job::Instruction(text.clone()),
        _ => return Err(ApiError::invalid("give exactly one of subgoal or instruction")),
    };
    let backend = backend_config
        .build()
        .map_err(|e| ApiError::invalid(format!("backend {profile}: {e}")))?;

    let meta = SessionMeta {
        id: app.next_id(scheme),
        domain: req.domain.clone(),
        scheme,
        subgoal: req.subgoal.clone(),
        instruction: req.instruction.clone(),
        backend: profile,
        initial: req.state.unwrap_or(builtin.initial),
    };
    let handle = Arc::new(SessionHandle::create(&app.config.data_dir, meta).map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE", e.to_string())
    })?);
    let (tx, rx) = mpsc::channel();
    let id = handle.meta.id.clone();
    app.sessions.write().expect("session table").insert(
        id.clone(),
        Arc::new(Entry {
            handle: handle.clone(),
            feedback: Mutex::new(Some(tx)),
        }),
    );

    let timeout = Duration::from_secs_f64(app.config.feedback_timeout_seconds.max(0.001));
    let worker = handle.clone();
    tokio::spawn(async move {
        let h = worker.clone();
        let joined = tokio::task::spawn_blocking(move || run_job(&h, backend, job, rx, timeout)).await;
        if joined.is_err() {
            worker.close();
        }
    });
    Ok((StatusCode::CREATED, Json(json!({"id": id}))).into_response())
}

/// Writes scheme events into the session log.
struct Tap<'h> {
    handle: &'h SessionHandle,
    stage: Option<&'static str>,
}

impl SessionObserver for Tap<'_> {
    fn event(&self, source: &str, kind: EventKind, mut payload: Value) {
        if let Value::Object(map) = &mut payload {
            if let Some(stage) = self.stage {
                map.insert("stage".into(), json!(stage));
                map.insert("source".into(), json!(source));
            }
        }
        self.handle.append(kind, payload);
    }
}

/// Feedback arriving over HTTP. A request that stays unanswered for
/// `timeout` is announced again.
struct HttpFeedback<'h> {
    handle: &'h SessionHandle,
    rx: mpsc::Receiver<Feedback>,
    timeout: Duration,
}

impl FeedbackChannel for HttpFeedback<'_> {
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<Feedback> {
        let mut repeat = 0u32;
        loop {
            match self.rx.recv_timeout(self.timeout) {
                Ok(fb) => return Some(fb),
                Err(mpsc::RecvTimeoutError::Disconnected) => return None,
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    repeat += 1;
                    self.handle
                        .reannounce(json!({"version": req.version, "repeat": repeat}));
                }
            }
        }
    }
}

fn run_job(handle: &SessionHandle, backend: Arc<dyn Backend>, job: Job, rx: mpsc::Receiver<Feedback>, timeout: Duration) {
    let mut channel = HttpFeedback { handle, rx, timeout };
    let meta = &handle.meta;
    match job {
        Job::Subgoal { goal, domain } => {
            let tap = Tap { handle, stage: None };
            let gen = Generator::new(&*backend).with_observer(&tap).with_session_id(meta.id.clone());
            let (_, result) = gen.generate(meta.scheme, &goal, &meta.initial, &domain, Some(&mut channel));
            if let Err(e) = result {
                if !handle.events_after(0).1 {
                    handle.append(EventKind::Failed, json!({"code": e.code(), "message": e.to_string()}));
                }
            }
        }
        Job::Instruction(text) => {
            let tap = Tap {
                handle,
                stage: Some("subgoal"),
            };
            let gen = Generator::new(&*backend).with_observer(&tap).with_session_id(meta.id.clone());
            let report = run_assembly(&text, &meta.domain, meta.scheme, &gen, Some(&mut channel));
            let subgoals: Vec<String> = report.plan.subgoals.iter().map(|g| g.conjunction_text()).collect();
            match &report.error {
                None => handle.append(
                    EventKind::Accepted,
                    json!({"stage": "run", "subgoals": subgoals, "final_state": report.final_state}),
                ),
                Some(e) => handle.append(
                    EventKind::Failed,
                    json!({"stage": "run", "code": e.code, "message": e.message, "subgoals": subgoals}),
                ),
            };
        }
    }
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Value> {
    let sessions = app.sessions.read().expect("session table");
    let rows: Vec<Value> = sessions
        .values()
        .map(|e| {
            let s = e.handle.snapshot();
            json!({"id": s.meta.id, "scheme": s.meta.scheme, "domain": s.meta.domain, "status": s.status})
        })
        .collect();
    Json(Value::Array(rows))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    Ok(Json(app.entry(&id)?.handle.snapshot()))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

async fn session_events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = app.entry(&id)?.handle.clone();
    let after = match headers.get("last-event-id") {
        Some(v) => v
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| ApiError::invalid("Last-Event-ID must be an event sequence number"))?,
        None => q.after.unwrap_or(0),
    };
    Ok(Sse::new(event_stream(handle, after)).keep_alive(KeepAlive::default()))
}

/// Replays events after `after`, then follows the log until the session ends.
pub fn event_stream(handle: Arc<SessionHandle>, after: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = handle.changed.subscribe();
    futures::stream::unfold(
        (handle, after, rx, Vec::<SessionEvent>::new()),
        |(handle, mut after, mut rx, mut pending)| async move {
            loop {
                if !pending.is_empty() {
                    let ev = pending.remove(0);
                    after = ev.seq;
                    let data = serde_json::to_string(&ev).expect("event serializes");
                    let sse = Event::default().id(ev.seq.to_string()).event(ev.kind.as_str()).data(data);
                    return Some((Ok(sse), (handle, after, rx, pending)));
                }
                rx.borrow_and_update();
                let (fresh, terminal) = handle.events_after(after);
                if !fresh.is_empty() {
                    pending = fresh;
                    continue;
                }
                if terminal || rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    )
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    kind: String,
    #[serde(default)]
    text: Option<String>,
}

async fn post_feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let entry = app.entry(&id)?;
    let body: FeedbackBody = parse_body(&body)?;
    let fb = match (body.kind.as_str(), body.text) {
        ("accept", _) => Feedback::Accept,
        ("abort", _) => Feedback::Abort,
        ("comment", Some(t)) if !t.trim().is_empty() => Feedback::Comment(t.trim().to_string()),
        ("comment", _) => return Err(ApiError::invalid("comment feedback needs non-empty text")),
        (other, _) => return Err(ApiError::invalid(format!("unknown feedback kind {other:?}"))),
    };
    if !entry.handle.claim_feedback() {
        return Err(ApiError::conflict(format!(
            "session {id} is {:?}, not awaiting feedback",
            entry.handle.snapshot().status
        )));
    }
    let sender = entry.feedback.lock().expect("feedback sender");
    match sender.as_ref().map(|tx| tx.send(fb)) {
        Some(Ok(())) => Ok(StatusCode::NO_CONTENT),
        _ => Err(ApiError::conflict(format!("session {id} is no longer running"))),
    }
}

#[derive(Debug, Deserialize)]
struct SimulateQuery {
    version: Option<usize>,
}

async fn simulate_candidate(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SimulateQuery>,
) -> Result<Response, ApiError> {
    let handle = app.entry(&id)?.handle.clone();
    let snap = handle.snapshot();
    let candidate = match q.version {
        Some(v) => snap
            .candidates
            .iter()
            .find(|c| c.version == v)
            .ok_or_else(|| ApiError::not_found("candidate version", &v.to_string()))?,
        None => snap
            .candidates
            .last()
            .ok_or_else(|| ApiError::conflict("session has no candidate yet"))?,
    };
    let tree = candidate
        .tree
        .as_ref()
        .ok_or_else(|| ApiError::conflict(format!("candidate {} did not parse into a tree", candidate.version)))?;
    let domain = builtin_domain(&snap.meta.domain).map_err(|_| ApiError::not_found("domain", &snap.meta.domain))?;
    let trace = simulate(tree, &snap.meta.initial, &domain.domain, DEFAULT_TICK_BUDGET);
    Ok(Json(trace).into_response())
}

async fn get_domain(Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let b = builtin_domain(&id).map_err(|_| ApiError::not_found("domain", &id))?;
    let document: Value = serde_json::from_str(b.document).expect("embedded domain parses");
    Ok(Json(json!({
        "id": id,
        "document": document,
        "rendered": render_pddl_like(&b.domain),
        "initial": b.initial,
        "initial_triples": render_state_triples(&b.initial),
        "goals": b.goals,
    })))
}
