//! Task suites, batch evaluation, report tables and dataset export.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backends::{oracle_make_plan, OracleLimits};
use crate::bt::{emit_tree, parse_tree, well_formed};
use crate::data;
use crate::domain::{builtin_domain, BuiltinDomain, DomainError, Goal, WorldState};
use crate::schemes::{
    Feedback, FeedbackChannel, FeedbackRequest, GenerationSession, Generator, Scheme, SessionStatus,
};
use crate::validation::MetricsRecord;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("unknown suite {0}")]
    UnknownSuite(String),
    #[error("suite document: {0}")]
    SuiteFormat(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("task {task} has no oracle plan: {reason}")]
    Unsolvable { task: String, reason: String },
    #[error("no samples to export")]
    EmptyExport,
    #[error("sample from session {session} does not validate: {reason}")]
    InvalidSample { session: String, reason: String },
}

impl HarnessError {
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::UnknownSuite(_) => "UNKNOWN_SUITE",
            HarnessError::SuiteFormat(_) => "SUITE_FORMAT",
            HarnessError::Domain(_) => "DOMAIN_ERROR",
            HarnessError::Unsolvable { .. } => "UNSOLVABLE",
            HarnessError::EmptyExport => "EMPTY_EXPORT",
            HarnessError::InvalidSample { .. } => "INVALID_SAMPLE",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteDoc {
    id: String,
    domain: String,
    #[serde(default)]
    notes: String,
    tasks: Vec<TaskDoc>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDoc {
    id: String,
    #[serde(default)]
    state: Option<WorldState>,
    goal: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task {
    pub id: String,
    pub initial: WorldState,
    pub goal: Goal,
}

#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub id: String,
    pub notes: String,
    pub domain: BuiltinDomain,
    pub tasks: Vec<Task>,
}

pub const BUILTIN_SUITES: [&str; 3] = ["gearset-10", "chair-5", "lamp-5"];

fn suite_document(id: &str) -> Option<&'static str> {
    match id {
        "gearset-10" => Some(include_str!("../data/suites/gearset-10.json")),
        "chair-5" => Some(include_str!("../data/suites/chair-5.json")),
        "lamp-5" => Some(include_str!("../data/suites/lamp-5.json")),
        _ => None,
    }
}

pub fn builtin_suite(id: &str) -> Result<TaskSuite, HarnessError> {
    let doc = suite_document(id).ok_or_else(|| HarnessError::UnknownSuite(id.to_string()))?;
    load_suite(doc)
}

/// Parses a suite document and checks that the oracle can solve every task.
pub fn load_suite(text: &str) -> Result<TaskSuite, HarnessError> {
    let doc: SuiteDoc = serde_json::from_str(text).map_err(|e| HarnessError::SuiteFormat(e.to_string()))?;
    let domain = builtin_domain(&doc.domain)?;
    let mut tasks = Vec::with_capacity(doc.tasks.len());
    for t in doc.tasks {
        let mut goal = Goal::parse(&t.goal)?;
        goal.description = t.description;
        domain.domain.check_goal(&goal)?;
        let initial = t.state.unwrap_or_else(|| domain.initial.clone());
        oracle_make_plan(&initial, &goal, &domain.domain, OracleLimits::default()).map_err(|e| {
            HarnessError::Unsolvable {
                task: t.id.clone(),
                reason: e.to_string(),
            }
        })?;
        tasks.push(Task {
            id: t.id,
            initial,
            goal,
        });
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(TaskSuite {
        id: doc.id,
        notes: doc.notes,
        domain,
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub session: String,
    pub metrics: MetricsRecord,
    /// Sum of backend-reported latencies.
    pub declared_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub domain: String,
    pub scheme: Scheme,
    pub backend: String,
    pub rows: Vec<TaskRow>,
    #[serde(skip)]
    pub sessions: Vec<GenerationSession>,
}

/// Aggregate over the rows of one report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub n: usize,
    pub sr: usize,
    pub lc: usize,
    pub exec: usize,
    pub gd_seconds: f64,
    pub wall_seconds: f64,
    pub tc_tokens: f64,
}

impl SuiteReport {
    /// GD uses measured time, or the declared backend latencies when
    /// `stable` is set.
    pub fn aggregate(&self, stable: bool) -> Aggregate {
        let n = self.rows.len();
        let mean = |f: &dyn Fn(&TaskRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Aggregate {
            n,
            sr: self.rows.iter().filter(|r| r.metrics.sr).count(),
            lc: self.rows.iter().filter(|r| r.metrics.lc).count(),
            exec: self.rows.iter().filter(|r| r.metrics.exec).count(),
            gd_seconds: mean(&|r| if stable { r.declared_seconds } else { r.metrics.gd_seconds }),
            wall_seconds: mean(&|r| if stable { r.declared_seconds } else { r.metrics.wall_seconds }),
            tc_tokens: mean(&|r| r.metrics.tc_tokens as f64),
        }
    }
}

/// Accepts every candidate that parsed into a tree and asks for a
/// regeneration otherwise. Stands in for the operator in unattended runs.
#[derive(Debug, Clone, Default)]
pub struct AutoAccept {
    pub requests: usize,
}

impl FeedbackChannel for AutoAccept {
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<Feedback> {
        self.requests += 1;
        Some(match req.tree {
            Some(_) => Feedback::Accept,
            None => Feedback::Comment("Reply with a single behavior tree in a ```json block.".into()),
        })
    }
}

/// Runs `scheme` over every task. The human-in-the-loop scheme reads its
/// decisions from `feedback`.
pub fn run_suite(
    suite: &TaskSuite,
    scheme: Scheme,
    gen: &Generator<'_>,
    mut feedback: Option<&mut dyn FeedbackChannel>,
) -> SuiteReport {
    let mut rows = Vec::new();
    let mut sessions = Vec::new();
    for task in &suite.tasks {
        let channel = feedback.as_mut().map(|c| &mut **c as &mut dyn FeedbackChannel);
        let (mut session, result) = gen.generate(scheme, &task.goal, &task.initial, &suite.domain.domain, channel);
        session.id = format!("{}-{}-{}", suite.id, task.id, scheme);
        rows.push(TaskRow {
            task: task.id.clone(),
            session: session.id.clone(),
            metrics: session.metrics.clone(),
            declared_seconds: session.declared_latency(),
            error: result.err().map(|e| e.code().to_string()),
        });
        sessions.push(session);
    }
    rows.sort_by(|a, b| a.task.cmp(&b.task));
    SuiteReport {
        suite: suite.id.clone(),
        domain: suite.domain.domain.id.clone(),
        scheme,
        backend: gen.backend.name().to_string(),
        rows,
        sessions,
    }
}

/// Human-readable report: one aggregate row per scheme with the columns
/// `Method SR LC Exec GD(sec.) TC`, then per-task rows. With `stable` the
/// timestamp and wall-time lines are left out and GD comes from declared
/// latencies, so identical transcripts give identical bytes.
pub fn render_report(reports: &[SuiteReport], stable: bool) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        let _ = writeln!(
            out,
            "# suite: {} (domain {}, {} tasks, backend {})",
            first.suite,
            first.domain,
            first.rows.len(),
            first.backend
        );
    }
    if !stable {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let _ = writeln!(out, "# generated: {now}");
    }
    out.push('\n');
    out.push_str("| Method | SR | LC | Exec | GD(sec.) | TC |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in reports {
        let a = r.aggregate(stable);
        let _ = writeln!(
            out,
            "| {} | {}/{} | {}/{} | {}/{} | {:.2} | {:.2} |",
            r.scheme.label(),
            a.sr,
            a.n,
            a.lc,
            a.n,
            a.exec,
            a.n,
            a.gd_seconds,
            a.tc_tokens
        );
    }
    if !stable {
        out.push('\n');
        for r in reports {
            let a = r.aggregate(false);
            let _ = writeln!(out, "wall time incl. feedback (sec.), {}: {:.2}", r.scheme.label(), a.wall_seconds);
        }
    }
    out.push_str("\n| Task | Method | SR | LC | Exec | GD(sec.) | TC | Failure |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    let mark = |b: bool| if b { "yes" } else { "no" };
    for r in reports {
        for row in &r.rows {
            let gd = if stable { row.declared_seconds } else { row.metrics.gd_seconds };
            let mut failure: Vec<String> = row.metrics.failure_reasons.iter().map(|f| f.code().to_string()).collect();
            if let Some(e) = &row.error {
                if !failure.contains(e) {
                    failure.push(e.clone());
                }
            }
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {:.2} | {} | {} |",
                row.task,
                r.scheme.label(),
                mark(row.metrics.sr),
                mark(row.metrics.lc),
                mark(row.metrics.exec),
                gd,
                row.metrics.tc_tokens,
                if failure.is_empty() { "-".to_string() } else { failure.join(", ") }
            );
        }
    }
    out
}

/// Machine-readable report: one JSON document with all rows.
pub fn render_report_json(reports: &[SuiteReport], stable: bool) -> String {
    let docs: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            let a = r.aggregate(stable);
            serde_json::json!({
                "suite": r.suite,
                "domain": r.domain,
                "scheme": r.scheme,
                "backend": r.backend,
                "aggregate": a,
                "rows": r.rows,
            })
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&docs).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    UnitTree,
    OneStep,
}

impl std::str::FromStr for TaskType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "unit_tree" => Ok(TaskType::UnitTree),
            "one_step" => Ok(TaskType::OneStep),
            other => Err(format!("unknown task type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub task_type: TaskType,
    pub prompt: String,
    pub completion: String,
    pub session: String,
}

/// Collects training samples: one per accepted MakeTree exchange of recursive
/// sessions (`unit_tree`) or one per accepted one-step session (`one_step`).
/// Every completion is re-parsed and checked against its domain.
pub fn export_dataset(sessions: &[GenerationSession], task_type: TaskType) -> Result<Vec<DatasetSample>, HarnessError> {
    let mut out = Vec::new();
    for s in sessions {
        let candidates: Vec<(String, String)> = match (task_type, s.scheme) {
            (TaskType::UnitTree, Scheme::Recursive) => s
                .unit_trees
                .iter()
                .map(|u| (u.prompt.clone(), u.completion.clone()))
                .collect(),
            (TaskType::OneStep, Scheme::OneStep) if s.status == SessionStatus::Accepted => {
                match (s.calls.first(), &s.final_tree) {
                    (Some(call), Some(tree)) => vec![(call.prompt.clone(), emit_tree(tree))],
                    _ => Vec::new(),
                }
            }
            _ => Vec::new(),
        };
        if candidates.is_empty() {
            continue;
        }
        let domain = builtin_domain(&s.domain)?.domain;
        for (prompt, completion) in candidates {
            let invalid = |reason: String| HarnessError::InvalidSample {
                session: s.id.clone(),
                reason,
            };
            let tree = parse_tree(&completion).map_err(|e| invalid(e.to_string()))?;
            let report = well_formed(&tree, &domain);
            if !report.pass() {
                return Err(invalid(format!("{:?}", report.violations)));
            }
            out.push(DatasetSample {
                task_type,
                prompt,
                completion,
                session: s.id.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(HarnessError::EmptyExport);
    }
    Ok(out)
}

pub fn dataset_jsonl(samples: &[DatasetSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

/// The reference tree shipped with the crate.
pub fn reference_tree() -> &'static str {
    data::REFERENCE_TREE
}
