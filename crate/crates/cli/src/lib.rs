//! `btforge` command line: validate, simulate, generate, eval, export-dataset
//! and serve.
//!
//! Exit codes: 0 success, 1 verdict failure, 2 usage or input error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use btforge::backends::{Backend, BackendConfig, RecordingBackend};
use btforge::bt::emit_tree;
use btforge::domain::{builtin_domain, goal_satisfied, BuiltinDomain, Goal, WorldState};
use btforge::harness::{
    builtin_suite, dataset_jsonl, export_dataset, load_suite, render_report, render_report_json, run_suite, AutoAccept,
    TaskSuite, TaskType,
};
use btforge::schemes::{
    run_assembly, Feedback, FeedbackChannel, FeedbackRequest, GenerationSession, Generator, Scheme, SchemeConfig,
    Templates,
};
use btforge::sim::simulate;
use btforge::validation::check_exec;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    UnitTree,
    OneStep,
}

#[derive(Debug, Parser)]
#[command(name = "btforge", version, about = "Behavior-tree plan generation, validation and evaluation")]
struct Cli {
    /// Output style.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check that a tree document is well formed for a domain.
    Validate {
        /// Tree file, or `-` for stdin. Model output with a fenced block is accepted.
        tree: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Execute a tree in the simulator.
    Simulate {
        tree: PathBuf,
        #[arg(long)]
        domain: String,
        /// World-state JSON; defaults to the domain's initial scene.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Also require this goal to hold at the end.
        #[arg(long)]
        goal: Option<String>,
        #[arg(long, default_value_t = btforge::sim::DEFAULT_TICK_BUDGET)]
        budget: usize,
    },
    /// Generate a tree for a subgoal, or run a whole instruction.
    Generate {
        #[arg(long)]
        scheme: String,
        #[arg(long, conflicts_with = "instruction", required_unless_present = "instruction")]
        subgoal: Option<String>,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long, default_value = "gearset")]
        domain: String,
        #[arg(long)]
        state: Option<PathBuf>,
        /// `oracle`, `scripted:<transcript.jsonl>` or `remote:<model>`.
        #[arg(long, default_value = "oracle")]
        backend: String,
        /// Ask for feedback on stdin (human-in-the-loop scheme).
        #[arg(long)]
        interactive: bool,
        /// Save the backend exchanges as a replayable transcript.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Directory with prompt template overrides.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Run a task suite and print the metrics report.
    Eval {
        /// Builtin suite id or a suite file.
        #[arg(long)]
        suite: String,
        /// A scheme name or `all`.
        #[arg(long, default_value = "all")]
        scheme: String,
        /// `oracle`, `scripted:<path>` or `remote:<model>`. With several
        /// schemes a scripted path names a directory of `<scheme>.jsonl`.
        #[arg(long, default_value = "oracle")]
        backend: String,
        /// Omit timestamps and wall time; GD from declared latencies.
        #[arg(long)]
        stable: bool,
        /// Directory to write one transcript per scheme into.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Write every generation session as JSON lines.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Build a fine-tuning dataset from generation sessions.
    ExportDataset {
        #[arg(long, value_enum)]
        task_type: DatasetKind,
        /// Session JSON lines written by `eval --sessions`.
        #[arg(long, conflicts_with = "suite", required_unless_present = "suite")]
        sessions: Option<PathBuf>,
        /// Run this suite with the matching scheme instead.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value = "oracle")]
        backend: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.to_string())
    }
}

type Outcome = Result<i32, UsageError>;

pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(UsageError(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let format = cli.format;
    match cli.command {
        Command::Validate { tree, domain } => validate(&tree, &domain, format, out),
        Command::Simulate {
            tree,
            domain,
            state,
            goal,
            budget,
        } => simulate_cmd(&tree, &domain, state.as_deref(), goal.as_deref(), budget, format, out),
        Command::Generate {
            scheme,
            subgoal,
            instruction,
            domain,
            state,
            backend,
            interactive,
            record,
            templates,
        } => {
            let args = GenerateArgs {
                scheme: scheme.parse()?,
                subgoal,
                instruction,
                domain,
                state,
                backend,
                interactive,
                record,
                templates,
            };
            generate(args, format, out, err)
        }
        Command::Eval {
            suite,
            scheme,
            backend,
            stable,
            record,
            sessions,
        } => eval(&suite, &scheme, &backend, stable, record.as_deref(), sessions.as_deref(), format, out),
        Command::ExportDataset {
            task_type,
            sessions,
            suite,
            backend,
            out: path,
        } => export(task_type, sessions.as_deref(), suite.as_deref(), &backend, path.as_deref(), out, err),
        Command::Serve { config, bind, data_dir } => serve(config.as_deref(), bind, data_dir),
    }
}

fn read_input(path: &Path) -> Result<String, UsageError> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

fn domain(id: &str) -> Result<BuiltinDomain, UsageError> {
    builtin_domain(id).map_err(|_| UsageError(format!("unknown domain {id:?} (known: gearset, chair, lamp)")))
}

fn load_state(path: Option<&Path>, fallback: &WorldState) -> Result<WorldState, UsageError> {
    match path {
        Some(p) => Ok(WorldState::from_json(&read_input(p)?)?),
        None => Ok(fallback.clone()),
    }
}

fn validate(path: &Path, domain_id: &str, format: Format, out: &mut dyn Write) -> Outcome {
    let text = read_input(path)?;
    let d = domain(domain_id)?;
    let verdict = check_exec(&text, &d.domain);
    match format {
        Format::Json => writeln!(
            out,
            "{}",
            json!({"pass": verdict.pass, "violations": verdict.report.violations})
        )?,
        Format::Table => {
            if verdict.pass {
                writeln!(out, "PASS: well formed for domain {domain_id}")?;
            } else {
                writeln!(out, "FAIL: {} violation(s)", verdict.report.violations.len())?;
                for v in &verdict.report.violations {
                    writeln!(out, "  {} at {}: {}", v.code, v.path, v.detail)?;
                }
            }
        }
    }
    Ok(if verdict.pass { 0 } else { 1 })
}

fn simulate_cmd(
    path: &Path,
    domain_id: &str,
    state: Option<&Path>,
    goal: Option<&str>,
    budget: usize,
    format: Format,
    out: &mut dyn Write,
) -> Outcome {
    let text = read_input(path)?;
    let d = domain(domain_id)?;
    let initial = load_state(state, &d.initial)?;
    let goal = goal.map(Goal::parse).transpose()?;
    let verdict = check_exec(&text, &d.domain);
    let Some(tree) = verdict.tree.filter(|_| verdict.pass) else {
        writeln!(out, "FAIL: tree is not well formed")?;
        for v in &verdict.report.violations {
            writeln!(out, "  {} at {}: {}", v.code, v.path, v.detail)?;
        }
        return Ok(1);
    };
    let trace = simulate(&tree, &initial, &d.domain, budget);
    let reached = match &goal {
        Some(g) => goal_satisfied(&trace.final_state, g)?,
        None => true,
    };
    match format {
        Format::Json => writeln!(out, "{}", trace.to_json())?,
        Format::Table => {
            writeln!(out, "status: {:?} after {} tick(s)", trace.status, trace.ticks)?;
            for (i, a) in trace.fired.iter().enumerate() {
                writeln!(out, "  {}. {a}", i + 1)?;
            }
            for v in &trace.violations {
                let unmet: Vec<String> = v.unmet.iter().map(|p| p.to_string()).collect();
                writeln!(out, "violation: {} with unmet {}", v.action, unmet.join(", "))?;
            }
            if let Some(r) = trace.failure_reason {
                writeln!(out, "reason: {} ({})", r.code(), r.feedback_sentence())?;
            }
            if let Some(g) = &goal {
                writeln!(out, "goal {}: {}", g.conjunction_text(), if reached { "reached" } else { "not reached" })?;
            }
        }
    }
    Ok(if trace.succeeded() && reached { 0 } else { 1 })
}

/// Turns a `--backend` value into a configuration. A scripted directory is
/// resolved to `<dir>/<scheme>.jsonl`.
fn backend_config(value: &str, scheme: Option<Scheme>) -> Result<BackendConfig, UsageError> {
    if value == "oracle" {
        return Ok(BackendConfig::oracle());
    }
    if let Some(path) = value.strip_prefix("scripted:") {
        let mut p = PathBuf::from(path);
        if p.is_dir() {
            let s = scheme.ok_or_else(|| UsageError(format!("{path} is a directory")))?;
            p = p.join(format!("{s}.jsonl"));
        }
        return Ok(BackendConfig::scripted(p));
    }
    if let Some(model) = value.strip_prefix("remote:") {
        return Ok(serde_json::from_value(json!({"kind": "remote", "model": model}))?);
    }
    Err(UsageError(format!(
        "unknown backend {value:?}; use oracle, scripted:<path> or remote:<model>"
    )))
}

/// Every backend is wrapped for recording; the transcript is only written
/// when `--record` is given.
fn build_backend(value: &str, scheme: Option<Scheme>) -> Result<RecordingBackend<Arc<dyn Backend>>, UsageError> {
    Ok(RecordingBackend::new(backend_config(value, scheme)?.build()?))
}

/// Feedback typed on a terminal.
struct PromptFeedback<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> FeedbackChannel for PromptFeedback<R, W> {
    fn request(&mut self, req: &FeedbackRequest<'_>) -> Option<Feedback> {
        let w = &mut self.output;
        let _ = writeln!(w, "\n--- candidate {} ---", req.version);
        match req.tree {
            Some(t) => {
                let _ = write!(w, "{}", emit_tree(t));
            }
            None => {
                let _ = writeln!(w, "(no tree could be read)\n{}", req.raw);
            }
        }
        if let Some(trace) = req.trace {
            let fired: Vec<String> = trace.fired.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(w, "simulation: {:?}; fired: {}", trace.status, fired.join(" -> "));
        }
        let _ = write!(w, "accept / abort / or type a comment: ");
        let _ = w.flush();
        let mut line = String::new();
        match self.input.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(Feedback::parse(&line)),
        }
    }
}

struct GenerateArgs {
    scheme: Scheme,
    subgoal: Option<String>,
    instruction: Option<String>,
    domain: String,
    state: Option<PathBuf>,
    backend: String,
    interactive: bool,
    record: Option<PathBuf>,
    templates: Option<PathBuf>,
}

fn generate(a: GenerateArgs, format: Format, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let d = domain(&a.domain)?;
    let backend = build_backend(&a.backend, Some(a.scheme))?;
    let mut config = SchemeConfig::default();
    if let Some(dir) = &a.templates {
        config.templates = Templates::load_dir(dir)?;
    }
    let gen = Generator::new(&backend).with_config(config);
    let mut interactive = PromptFeedback {
        input: io::stdin().lock(),
        output: io::stderr(),
    };
    let mut auto = AutoAccept::default();
    let channel: &mut dyn FeedbackChannel = if a.interactive { &mut interactive } else { &mut auto };

    let code = if let Some(instruction) = &a.instruction {
        let report = run_assembly(instruction, &a.domain, a.scheme, &gen, Some(channel));
        match format {
            Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
            Format::Table => {
                for r in &report.records {
                    let status = if r.success { "ok" } else { "FAILED" };
                    writeln!(out, "{}. {} [{status}, {} attempt(s)]", r.index + 1, r.goal.conjunction_text(), r.attempts)?;
                }
                if let Some(e) = &report.error {
                    writeln!(err, "{}: {}", e.code, e.message)?;
                }
            }
        }
        i32::from(!report.succeeded())
    } else {
        let subgoal = a.subgoal.as_deref().unwrap_or_default();
        let goal = Goal::parse(subgoal)?;
        d.domain.check_goal(&goal)?;
        let initial = load_state(a.state.as_deref(), &d.initial)?;
        let (session, result) = gen.generate(a.scheme, &goal, &initial, &d.domain, Some(channel));
        match format {
            Format::Json => writeln!(out, "{}", session.to_json())?,
            Format::Table => {
                if let Ok(tree) = &result {
                    write!(out, "{}", emit_tree(tree))?;
                }
                let m = &session.metrics;
                writeln!(
                    err,
                    "sr={} lc={} exec={} gd={:.2}s tc={}",
                    m.sr, m.lc, m.exec, m.gd_seconds, m.tc_tokens
                )?;
            }
        }
        if let Err(e) = &result {
            writeln!(err, "{}: {e}", e.code())?;
        }
        i32::from(result.is_err())
    };
    if let Some(path) = &a.record {
        backend.save(path)?;
    }
    Ok(code)
}

fn suite(value: &str) -> Result<TaskSuite, UsageError> {
    match builtin_suite(value) {
        Ok(s) => Ok(s),
        Err(_) if Path::new(value).is_file() => Ok(load_suite(&read_input(Path::new(value))?)?),
        Err(e) => Err(UsageError(format!("{e} (known: gearset-10, chair-5, lamp-5, or a suite file)"))),
    }
}

fn schemes(value: &str) -> Result<Vec<Scheme>, UsageError> {
    if value == "all" {
        return Ok(Scheme::ALL.to_vec());
    }
    value.split(',').map(|s| s.trim().parse::<Scheme>().map_err(UsageError)).collect()
}

#[allow(clippy::too_many_arguments)]
fn eval(
    suite_spec: &str,
    scheme_spec: &str,
    backend_spec: &str,
    stable: bool,
    record: Option<&Path>,
    sessions_path: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Outcome {
    let suite = suite(suite_spec)?;
    let mut reports = Vec::new();
    for scheme in schemes(scheme_spec)? {
        let backend = build_backend(backend_spec, Some(scheme))?;
        let gen = Generator::new(&backend);
        let mut auto = AutoAccept::default();
        let report = run_suite(&suite, scheme, &gen, Some(&mut auto));
        if let Some(dir) = record {
            fs::create_dir_all(dir)?;
            backend.save(&dir.join(format!("{scheme}.jsonl")))?;
        }
        reports.push(report);
    }
    if let Some(path) = sessions_path {
        let mut text = String::new();
        for s in reports.iter().flat_map(|r| &r.sessions) {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        fs::write(path, text)?;
    }
    let rendered = match format {
        Format::Table => render_report(&reports, stable),
        Format::Json => render_report_json(&reports, stable),
    };
    out.write_all(rendered.as_bytes())?;
    Ok(0)
}

fn export(
    kind: DatasetKind,
    sessions_path: Option<&Path>,
    suite_spec: Option<&str>,
    backend_spec: &str,
    path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let (task_type, scheme) = match kind {
        DatasetKind::UnitTree => (TaskType::UnitTree, Scheme::Recursive),
        DatasetKind::OneStep => (TaskType::OneStep, Scheme::OneStep),
    };
    let sessions: Vec<GenerationSession> = match (sessions_path, suite_spec) {
        (Some(p), _) => read_input(p)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?,
        (None, Some(value)) => {
            let suite = suite(value)?;
            let backend = build_backend(backend_spec, Some(scheme))?;
            run_suite(&suite, scheme, &Generator::new(&backend), None).sessions
        }
        (None, None) => return Err(UsageError("give --sessions or --suite".into())),
    };
    let samples = match export_dataset(&sessions, task_type) {
        Ok(s) => s,
        Err(e) => {
            writeln!(err, "{}: {e}", e.code())?;
            return Ok(1);
        }
    };
    let text = dataset_jsonl(&samples);
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    writeln!(err, "exported {} sample(s)", samples.len())?;
    Ok(0)
}

fn serve(config: Option<&Path>, bind: Option<String>, data_dir: Option<PathBuf>) -> Outcome {
    let mut cfg = match config {
        Some(p) => btforge_service::ServiceConfig::load(p)?,
        None => btforge_service::ServiceConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(b) = bind {
        cfg.bind = b;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(btforge_service::serve(cfg))?;
    Ok(0)
}
