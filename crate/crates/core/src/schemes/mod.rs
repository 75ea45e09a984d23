//! The four generation pipelines (one-step, iterative with simulator
//! feedback, human-in-the-loop, recursive expansion), task decomposition and
//! the subgoal-by-subgoal assembly loop.

mod assembly;
mod hitl;
mod one_step;
mod recursive;
pub mod templates;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::{prompt_digest, Backend, BackendError, Completion, Query, Request};
use crate::bt::{emit_tree, BehaviorTree};
use crate::domain::{render_pddl_like, render_state_triples, DomainSpec, Goal, GroundAction, WorldState};
use crate::sim::SimTrace;
use crate::validation::MetricsRecord;

pub use assembly::{decompose, parse_subgoals, run_assembly, RunReport, SubgoalPlan, SubgoalRecord};
pub use hitl::{Feedback, FeedbackChannel, FeedbackRequest, ScriptedFeedback};
pub use templates::Templates;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SchemeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unparseable subgoal: {line:?}")]
    UnparseableSubgoal { line: String },
    #[error("generated output failed the format check: {0}")]
    ExecFailed(String),
    #[error("no accepted tree after {rounds} rounds")]
    RoundsExhausted { rounds: usize },
    #[error("aborted by user")]
    AbortedByUser,
    #[error("feedback channel closed")]
    ChannelClosed,
    #[error("expansion exceeded the depth limit of {max_depth}")]
    DepthLimitExceeded { max_depth: usize },
    #[error("invalid subtree for {action}: {reason}")]
    InvalidSubtree { action: String, reason: String },
    #[error("unusable {kind} reply: {reason}")]
    InvalidReply { kind: String, reason: String },
    #[error("run aborted at subgoal {index}: {reason}")]
    RunAborted { index: usize, reason: String },
    #[error("template error: {0}")]
    Template(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
}

impl SchemeError {
    pub fn code(&self) -> &'static str {
        match self {
            SchemeError::Backend(e) => e.code(),
            SchemeError::UnparseableSubgoal { .. } => "UNPARSEABLE_SUBGOAL",
            SchemeError::ExecFailed(_) => "EXEC_FAILED",
            SchemeError::RoundsExhausted { .. } => "ROUNDS_EXHAUSTED",
            SchemeError::AbortedByUser => "ABORTED_BY_USER",
            SchemeError::ChannelClosed => "CHANNEL_CLOSED",
            SchemeError::DepthLimitExceeded { .. } => "DEPTH_LIMIT_EXCEEDED",
            SchemeError::InvalidSubtree { .. } => "INVALID_SUBTREE",
            SchemeError::InvalidReply { .. } => "INVALID_REPLY",
            SchemeError::RunAborted { .. } => "RUN_ABORTED",
            SchemeError::Template(_) => "TEMPLATE_ERROR",
            SchemeError::UnknownDomain(_) => "UNKNOWN_DOMAIN",
        }
    }

    pub fn info(&self) -> ErrorInfo {
        ErrorInfo {
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    OneStep,
    Iterative,
    Hitl,
    Recursive,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::OneStep, Scheme::Iterative, Scheme::Hitl, Scheme::Recursive];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::OneStep => "one_step",
            Scheme::Iterative => "iterative",
            Scheme::Hitl => "hitl",
            Scheme::Recursive => "recursive",
        }
    }

    /// Row label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::OneStep => "One-step",
            Scheme::Iterative => "Iterative",
            Scheme::Hitl => "Human-in-the-loop",
            Scheme::Recursive => "Recursive",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "one_step" => Ok(Scheme::OneStep),
            "iterative" => Ok(Scheme::Iterative),
            "hitl" | "human_in_the_loop" => Ok(Scheme::Hitl),
            "recursive" => Ok(Scheme::Recursive),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Drafting,
    AwaitingFeedback,
    Accepted,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Human,
    Simulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub source: FeedbackSource,
    pub text: String,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: String,
    pub prompt: String,
    pub prompt_digest: String,
    pub completion: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub version: usize,
    pub raw: String,
    pub tree: Option<BehaviorTree>,
    pub exec: bool,
    pub trace: Option<SimTrace>,
}

/// One accepted MakeTree exchange of the recursive scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSample {
    pub action: GroundAction,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSession {
    pub id: String,
    pub domain: String,
    pub subgoal: Goal,
    pub scheme: Scheme,
    pub calls: Vec<CallRecord>,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bullet_plan: Option<String>,
    pub feedback: Vec<FeedbackEvent>,
    pub unit_trees: Vec<UnitSample>,
    pub final_tree: Option<BehaviorTree>,
    pub metrics: MetricsRecord,
    pub status: SessionStatus,
    pub error: Option<ErrorInfo>,
}

impl GenerationSession {
    pub fn new(id: impl Into<String>, domain: &str, subgoal: &Goal, scheme: Scheme) -> Self {
        GenerationSession {
            id: id.into(),
            domain: domain.to_string(),
            subgoal: subgoal.clone(),
            scheme,
            calls: Vec::new(),
            candidates: Vec::new(),
            bullet_plan: None,
            feedback: Vec::new(),
            unit_trees: Vec::new(),
            final_tree: None,
            metrics: MetricsRecord::default(),
            status: SessionStatus::Drafting,
            error: None,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.calls.iter().map(|c| c.prompt_tokens + c.completion_tokens).sum()
    }

    /// Sum of backend-reported latencies; a reproducible stand-in for GD.
    pub fn declared_latency(&self) -> f64 {
        self.calls.iter().map(|c| c.latency_seconds).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PromptSent,
    CompletionReceived,
    CandidateReady,
    SimulationDone,
    FeedbackRequested,
    FeedbackReceived,
    Accepted,
    Failed,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::PromptSent => "prompt_sent",
            EventKind::CompletionReceived => "completion_received",
            EventKind::CandidateReady => "candidate_ready",
            EventKind::SimulationDone => "simulation_done",
            EventKind::FeedbackRequested => "feedback_requested",
            EventKind::FeedbackReceived => "feedback_received",
            EventKind::Accepted => "accepted",
            EventKind::Failed => "failed",
        }
    }
}

/// Receives progress events while a scheme runs.
pub trait SessionObserver: Send + Sync {
    fn event(&self, session_id: &str, kind: EventKind, payload: Value);
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub templates: Templates,
    /// Rounds of the iterative scheme.
    pub max_rounds: usize,
    pub hitl_max_rounds: usize,
    pub max_depth: usize,
    pub tick_budget: usize,
    /// Generation attempts per subgoal in [`run_assembly`].
    pub max_attempts: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            templates: Templates::builtin(),
            max_rounds: 3,
            hitl_max_rounds: 10,
            max_depth: 8,
            tick_budget: crate::sim::DEFAULT_TICK_BUDGET,
            max_attempts: 2,
        }
    }
}

/// A backend plus scheme settings.
pub struct Generator<'a> {
    pub backend: &'a dyn Backend,
    pub config: SchemeConfig,
    pub observer: Option<&'a dyn SessionObserver>,
    pub session_id: Option<String>,
}

pub type SchemeResult = (GenerationSession, Result<BehaviorTree, SchemeError>);

impl<'a> Generator<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Generator {
            backend,
            config: SchemeConfig::default(),
            observer: None,
            session_id: None,
        }
    }

    pub fn with_config(mut self, config: SchemeConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_observer(mut self, observer: &'a dyn SessionObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn with_session_id(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    /// Runs `scheme`. The human-in-the-loop scheme needs `feedback`; without
    /// one it fails with CHANNEL_CLOSED.
    pub fn generate(
        &self,
        scheme: Scheme,
        subgoal: &Goal,
        initial: &WorldState,
        domain: &DomainSpec,
        feedback: Option<&mut dyn FeedbackChannel>,
    ) -> SchemeResult {
        match scheme {
            Scheme::OneStep => self.one_step(subgoal, initial, domain),
            Scheme::Iterative => self.iterative(subgoal, initial, domain),
            Scheme::Recursive => self.recursive(subgoal, initial, domain),
            Scheme::Hitl => match feedback {
                Some(ch) => self.hitl(subgoal, initial, domain, ch),
                None => {
                    let run = self.start(Scheme::Hitl, subgoal, domain);
                    run.finish(Err(SchemeError::ChannelClosed), MetricsRecord::default())
                }
            },
        }
    }

    fn start(&self, scheme: Scheme, subgoal: &Goal, domain: &DomainSpec) -> Run<'_, 'a> {
        let id = self.session_id.clone().unwrap_or_else(|| {
            let digest = prompt_digest(&format!("{}|{}", domain.id, subgoal.conjunction_text()));
            format!("{scheme}-{}-{}", domain.id, &digest[..8])
        });
        Run {
            gen: self,
            session: GenerationSession::new(id, &domain.id, subgoal, scheme),
            started: Instant::now(),
            waited: Duration::ZERO,
        }
    }

    pub(crate) fn render(&self, name: &str, slots: &[(&str, &str)]) -> Result<String, SchemeError> {
        self.config.templates.render(name, slots)
    }

    /// Feedback section for a regeneration prompt; empty when there is none.
    pub(crate) fn feedback_block(&self, template: &str, items: &[String]) -> Result<String, SchemeError> {
        if items.is_empty() {
            return Ok(String::new());
        }
        let list: String = items.iter().map(|i| format!("- {i}\n")).collect();
        self.render(template, &[("items", list.trim_end())])
    }
}

pub(crate) fn subgoal_text(goal: &Goal) -> String {
    if goal.description.is_empty() {
        goal.conjunction_text()
    } else {
        format!("{} ({})", goal.conjunction_text(), goal.description)
    }
}

pub(crate) fn knowledge(domain: &DomainSpec, state: &WorldState) -> (String, String) {
    (render_pddl_like(domain), render_state_triples(state))
}

/// Bookkeeping for one scheme execution.
pub(crate) struct Run<'g, 'a> {
    gen: &'g Generator<'a>,
    session: GenerationSession,
    started: Instant,
    waited: Duration,
}

impl Run<'_, '_> {
    fn emit(&self, kind: EventKind, payload: Value) {
        if let Some(obs) = self.gen.observer {
            obs.event(&self.session.id, kind, payload);
        }
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub(crate) fn call(&mut self, kind: &str, prompt: String, query: Query<'_>) -> Result<Completion, SchemeError> {
        let digest = prompt_digest(&prompt);
        self.emit(
            EventKind::PromptSent,
            json!({"call": kind, "prompt": prompt, "prompt_digest": digest}),
        );
        let c = self.gen.backend.complete(&Request { prompt: &prompt, query })?;
        self.emit(
            EventKind::CompletionReceived,
            json!({
                "call": kind,
                "text": c.text,
                "prompt_tokens": c.prompt_tokens,
                "completion_tokens": c.completion_tokens,
                "latency_seconds": c.latency_seconds,
            }),
        );
        self.session.calls.push(CallRecord {
            kind: kind.to_string(),
            prompt,
            prompt_digest: digest,
            completion: c.text.clone(),
            prompt_tokens: c.prompt_tokens,
            completion_tokens: c.completion_tokens,
            latency_seconds: c.latency_seconds,
        });
        Ok(c)
    }

    pub(crate) fn candidate(&mut self, raw: &str, tree: Option<&BehaviorTree>, exec: bool) -> usize {
        let version = self.session.candidates.len() + 1;
        self.session.candidates.push(Candidate {
            version,
            raw: raw.to_string(),
            tree: tree.cloned(),
            exec,
            trace: None,
        });
        self.emit(
            EventKind::CandidateReady,
            json!({
                "version": version,
                "exec": exec,
                "tree": tree,
                "document": tree.map(emit_tree),
                "bullet_plan": self.session.bullet_plan,
            }),
        );
        version
    }

    pub(crate) fn simulated(&mut self, trace: &SimTrace) {
        if let Some(c) = self.session.candidates.last_mut() {
            c.trace = Some(trace.clone());
        }
        let version = self.session.candidates.len();
        self.emit(EventKind::SimulationDone, json!({"version": version, "trace": trace}));
    }

    pub(crate) fn note(&mut self, source: FeedbackSource, text: &str) {
        self.session.feedback.push(FeedbackEvent {
            source,
            text: text.to_string(),
            elapsed_seconds: self.elapsed(),
        });
    }

    pub(crate) fn finish(
        mut self,
        result: Result<BehaviorTree, SchemeError>,
        mut metrics: MetricsRecord,
    ) -> SchemeResult {
        let wall = self.started.elapsed();
        metrics.wall_seconds = wall.as_secs_f64();
        metrics.gd_seconds = wall.saturating_sub(self.waited).as_secs_f64();
        metrics.tc_tokens = self.session.total_tokens();
        self.session.metrics = metrics;
        match &result {
            Ok(tree) => {
                self.session.status = SessionStatus::Accepted;
                self.session.final_tree = Some(tree.clone());
                self.emit(
                    EventKind::Accepted,
                    json!({"tree": tree, "document": emit_tree(tree), "metrics": self.session.metrics}),
                );
            }
            Err(e) => {
                self.session.status = SessionStatus::Failed;
                self.session.error = Some(e.info());
                self.emit(
                    EventKind::Failed,
                    json!({"code": e.code(), "message": e.to_string(), "metrics": self.session.metrics}),
                );
            }
        }
        (self.session, result)
    }
}

/// Runs the one-step scheme with default settings.
pub fn gen_one_step(subgoal: &Goal, initial: &WorldState, domain: &DomainSpec, backend: &dyn Backend) -> SchemeResult {
    Generator::new(backend).one_step(subgoal, initial, domain)
}

pub fn gen_iterative(
    subgoal: &Goal,
    initial: &WorldState,
    domain: &DomainSpec,
    backend: &dyn Backend,
    max_rounds: usize,
) -> SchemeResult {
    let mut g = Generator::new(backend);
    g.config.max_rounds = max_rounds;
    g.iterative(subgoal, initial, domain)
}

pub fn gen_hitl(
    subgoal: &Goal,
    initial: &WorldState,
    domain: &DomainSpec,
    backend: &dyn Backend,
    feedback: &mut dyn FeedbackChannel,
) -> SchemeResult {
    Generator::new(backend).hitl(subgoal, initial, domain, feedback)
}

pub fn gen_recursive(
    subgoal: &Goal,
    initial: &WorldState,
    domain: &DomainSpec,
    backend: &dyn Backend,
    max_depth: usize,
) -> SchemeResult {
    let mut g = Generator::new(backend);
    g.config.max_depth = max_depth;
    g.recursive(subgoal, initial, domain)
}
