//! Append-only session logs and the snapshot fold.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use btforge::bt::BehaviorTree;
use btforge::domain::WorldState;
use btforge::schemes::{EventKind, Scheme, SessionStatus};
use btforge::sim::SimTrace;
use btforge::validation::MetricsRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
}

impl SessionEvent {
    /// Accepted and failed events close the session unless they belong to
    /// one subgoal of a longer run.
    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, EventKind::Accepted | EventKind::Failed)
            && self.payload.get("stage").and_then(Value::as_str) != Some("subgoal")
    }
}

/// Creation parameters, stored as the first line of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub domain: String,
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgoal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub backend: String,
    pub initial: WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub version: usize,
    pub exec: bool,
    pub tree: Option<BehaviorTree>,
    pub document: Option<String>,
    pub trace: Option<SimTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    #[serde(flatten)]
    pub meta: SessionMeta,
    pub status: SessionStatus,
    pub bullet_plan: Option<String>,
    pub candidates: Vec<CandidateView>,
    pub feedback: Vec<Value>,
    pub final_tree: Option<BehaviorTree>,
    pub metrics: Option<MetricsRecord>,
    pub error: Option<Value>,
    pub prompts: usize,
    pub completions: usize,
    pub last_seq: u64,
}

impl Snapshot {
    pub fn new(meta: SessionMeta) -> Self {
        Snapshot {
            meta,
            status: SessionStatus::Drafting,
            bullet_plan: None,
            candidates: Vec::new(),
            feedback: Vec::new(),
            final_tree: None,
            metrics: None,
            error: None,
            prompts: 0,
            completions: 0,
            last_seq: 0,
        }
    }

    pub fn apply(&mut self, ev: &SessionEvent) {
        let p = &ev.payload;
        let field = |name: &str| p.get(name).cloned().unwrap_or(Value::Null);
        let subgoal_stage = p.get("stage").and_then(Value::as_str) == Some("subgoal");
        self.last_seq = ev.seq;
        match ev.kind {
            EventKind::PromptSent => self.prompts += 1,
            EventKind::CompletionReceived => self.completions += 1,
            EventKind::CandidateReady => {
                if let Some(plan) = p.get("bullet_plan").and_then(Value::as_str) {
                    self.bullet_plan = Some(plan.to_string());
                }
                self.candidates.push(CandidateView {
                    version: self.candidates.len() + 1,
                    exec: p.get("exec").and_then(Value::as_bool).unwrap_or(false),
                    tree: serde_json::from_value(field("tree")).ok(),
                    document: p.get("document").and_then(Value::as_str).map(str::to_string),
                    trace: None,
                });
            }
            EventKind::SimulationDone => {
                if let Some(c) = self.candidates.last_mut() {
                    c.trace = serde_json::from_value(field("trace")).ok();
                }
            }
            EventKind::FeedbackRequested => self.status = SessionStatus::AwaitingFeedback,
            EventKind::FeedbackReceived => {
                self.status = SessionStatus::Drafting;
                self.feedback.push(field("feedback"));
            }
            EventKind::Accepted => {
                if !subgoal_stage {
                    self.status = SessionStatus::Accepted;
                }
                self.final_tree = serde_json::from_value(field("tree")).ok().or(self.final_tree.take());
                self.metrics = serde_json::from_value(field("metrics")).ok();
            }
            EventKind::Failed => {
                if !subgoal_stage {
                    self.status = SessionStatus::Failed;
                    self.error = Some(serde_json::json!({"code": field("code"), "message": field("message")}));
                }
                self.metrics = serde_json::from_value(field("metrics")).ok();
            }
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.status, SessionStatus::Accepted | SessionStatus::Failed)
    }
}

/// The snapshot is a pure function of the creation record and the log.
pub fn fold(meta: &SessionMeta, events: &[SessionEvent]) -> Snapshot {
    let mut s = Snapshot::new(meta.clone());
    for ev in events {
        s.apply(ev);
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

pub(crate) struct Inner {
    pub events: Vec<SessionEvent>,
    pub terminal: bool,
    /// A feedback request is open and has not been answered yet.
    pub awaiting: bool,
    file: Option<File>,
}

/// One session: its log, the single writer lock, and a change signal for
/// event-stream readers.
pub struct SessionHandle {
    pub meta: SessionMeta,
    pub(crate) inner: Mutex<Inner>,
    pub(crate) changed: watch::Sender<u64>,
}

fn log_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.jsonl"))
}

impl SessionHandle {
    pub fn create(dir: &Path, meta: SessionMeta) -> Result<Self, StoreError> {
        let path = log_path(dir, &meta.id);
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path).map_err(io)?;
        let line = serde_json::to_string(&meta).expect("meta serializes");
        writeln!(file, "{line}").map_err(io)?;
        Ok(SessionHandle {
            meta,
            inner: Mutex::new(Inner {
                events: Vec::new(),
                terminal: false,
                awaiting: false,
                file: Some(file),
            }),
            changed: watch::channel(0).0,
        })
    }

    /// Reads a log back. Loaded sessions are read-only: no generation is
    /// attached to them any more, so their streams end after replay.
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let corrupt = |line: usize, reason: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let file = File::open(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| corrupt(1, "empty log".into()))?
            .map_err(|e| corrupt(1, e.to_string()))?;
        let meta: SessionMeta = serde_json::from_str(&first).map_err(|e| corrupt(1, e.to_string()))?;
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| corrupt(i + 2, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: SessionEvent = serde_json::from_str(&line).map_err(|e| corrupt(i + 2, e.to_string()))?;
            events.push(ev);
        }
        let last = events.last().map_or(0, |e| e.seq);
        Ok(SessionHandle {
            meta,
            inner: Mutex::new(Inner {
                events,
                terminal: true,
                awaiting: false,
                file: None,
            }),
            changed: watch::channel(last).0,
        })
    }

    /// Appends one event, writes it through to disk and wakes readers.
    pub fn append(&self, kind: EventKind, payload: Value) -> SessionEvent {
        let mut inner = self.inner.lock().expect("session lock");
        self.append_locked(&mut inner, kind, payload)
    }

    fn append_locked(&self, inner: &mut Inner, kind: EventKind, payload: Value) -> SessionEvent {
        let ev = SessionEvent {
            session: self.meta.id.clone(),
            seq: inner.events.len() as u64 + 1,
            kind,
            payload,
        };
        if let Some(f) = inner.file.as_mut() {
            let line = serde_json::to_string(&ev).expect("event serializes");
            // A failed write leaves the in-memory log authoritative.
            if writeln!(f, "{line}").and_then(|_| f.flush()).is_err() {
                inner.file = None;
            }
        }
        match kind {
            EventKind::FeedbackRequested => inner.awaiting = true,
            EventKind::FeedbackReceived => inner.awaiting = false,
            _ => {}
        }
        if ev.is_terminal() {
            inner.terminal = true;
            inner.awaiting = false;
        }
        inner.events.push(ev.clone());
        self.changed.send_replace(ev.seq);
        ev
    }

    /// Announces the open request again, unless it was answered meanwhile.
    pub(crate) fn reannounce(&self, payload: Value) -> bool {
        let mut inner = self.inner.lock().expect("session lock");
        if !inner.awaiting || inner.terminal {
            return false;
        }
        self.append_locked(&mut inner, EventKind::FeedbackRequested, payload);
        true
    }

    /// Claims the open feedback request. Fails when none is open.
    pub(crate) fn claim_feedback(&self) -> bool {
        let mut inner = self.inner.lock().expect("session lock");
        std::mem::replace(&mut inner.awaiting, false)
    }

    /// Marks the run as over without a terminal event, e.g. when the worker
    /// thread died.
    pub(crate) fn close(&self) {
        let mut inner = self.inner.lock().expect("session lock");
        inner.terminal = true;
        inner.awaiting = false;
        inner.file = None;
        let last = inner.events.len() as u64;
        drop(inner);
        self.changed.send_replace(last);
    }

    pub fn events_after(&self, after: u64) -> (Vec<SessionEvent>, bool) {
        let inner = self.inner.lock().expect("session lock");
        let from = (after as usize).min(inner.events.len());
        (inner.events[from..].to_vec(), inner.terminal)
    }

    pub fn snapshot(&self) -> Snapshot {
        let inner = self.inner.lock().expect("session lock");
        fold(&self.meta, &inner.events)
    }
}

/// Loads every `*.jsonl` log under `dir`.
pub fn load_all(dir: &Path) -> Result<Vec<SessionHandle>, StoreError> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(source) => {
            return Err(StoreError::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for p in paths {
        out.push(SessionHandle::load(&p)?);
    }
    Ok(out)
}
