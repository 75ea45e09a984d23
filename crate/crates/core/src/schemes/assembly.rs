//! Task decomposition and the subgoal-by-subgoal assembly loop.

use serde::{Deserialize, Serialize};

use super::{
    knowledge, CallRecord, ErrorInfo, FeedbackChannel, GenerationSession, Generator, Scheme, SchemeError,
};
use crate::backends::{prompt_digest, Query, Request};
use crate::domain::{builtin_domain, goal_satisfied, DomainSpec, Goal, WorldState};
use crate::sim::simulate;
use crate::validation::MetricsRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalPlan {
    pub subgoals: Vec<Goal>,
    /// Index of the next pending subgoal.
    pub cursor: usize,
}

/// Reads one subgoal per line. Bullets and numbering are stripped, blank
/// lines, code fences and header lines ending in `:` are skipped.
pub fn parse_subgoals(reply: &str, domain: &DomainSpec) -> Result<Vec<Goal>, SchemeError> {
    let mut out = Vec::new();
    for raw in reply.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with("```") || line.ends_with(':') {
            continue;
        }
        let body = strip_marker(line);
        let unparseable = || SchemeError::UnparseableSubgoal { line: line.to_string() };
        let mut goal = Goal::parse(body).map_err(|_| unparseable())?;
        goal.conjuncts = goal.conjuncts.iter().map(|c| c.normalized()).collect();
        domain.check_goal(&goal).map_err(|_| unparseable())?;
        goal.description = body.to_string();
        out.push(goal);
    }
    if out.is_empty() {
        return Err(SchemeError::UnparseableSubgoal { line: reply.trim().to_string() });
    }
    Ok(out)
}

fn strip_marker(line: &str) -> &str {
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    line
}

/// Asks the backend to split `instruction` into ordered subgoals.
/// `benchmark_goals` lets the oracle answer "assemble the ..." requests.
pub fn decompose(
    gen: &Generator<'_>,
    instruction: &str,
    domain: &DomainSpec,
    state: &WorldState,
    benchmark_goals: &[Goal],
) -> Result<(SubgoalPlan, CallRecord), SchemeError> {
    let (domain_text, state_text) = knowledge(domain, state);
    let prompt = gen.render(
        "decompose",
        &[("domain", &domain_text), ("state", &state_text), ("instruction", instruction.trim())],
    )?;
    let query = Query::Decompose {
        instruction,
        state,
        domain,
        goals: benchmark_goals,
    };
    let c = gen.backend.complete(&Request { prompt: &prompt, query })?;
    let record = CallRecord {
        kind: "decompose".into(),
        prompt_digest: prompt_digest(&prompt),
        prompt,
        completion: c.text.clone(),
        prompt_tokens: c.prompt_tokens,
        completion_tokens: c.completion_tokens,
        latency_seconds: c.latency_seconds,
    };
    if instruction.trim().is_empty() {
        return Err(SchemeError::UnparseableSubgoal { line: String::new() });
    }
    let subgoals = parse_subgoals(&c.text, domain)?;
    Ok((SubgoalPlan { subgoals, cursor: 0 }, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalRecord {
    pub index: usize,
    pub goal: Goal,
    pub attempts: usize,
    pub success: bool,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub instruction: String,
    pub domain: String,
    pub scheme: Scheme,
    pub plan: SubgoalPlan,
    pub decompose_call: Option<CallRecord>,
    pub sessions: Vec<GenerationSession>,
    pub records: Vec<SubgoalRecord>,
    pub final_state: WorldState,
    pub error: Option<ErrorInfo>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Decomposes the instruction, then generates and simulates a tree per
/// subgoal. The cursor advances only when the tree reaches its subgoal; a
/// subgoal that fails `max_attempts` times aborts the run.
pub fn run_assembly(
    instruction: &str,
    domain_id: &str,
    scheme: Scheme,
    gen: &Generator<'_>,
    mut feedback: Option<&mut dyn FeedbackChannel>,
) -> RunReport {
    let mut report = RunReport {
        instruction: instruction.to_string(),
        domain: domain_id.to_string(),
        scheme,
        plan: SubgoalPlan {
            subgoals: Vec::new(),
            cursor: 0,
        },
        decompose_call: None,
        sessions: Vec::new(),
        records: Vec::new(),
        final_state: WorldState::default(),
        error: None,
    };
    let builtin = match builtin_domain(domain_id) {
        Ok(b) => b,
        Err(_) => {
            report.error = Some(SchemeError::UnknownDomain(domain_id.to_string()).info());
            return report;
        }
    };
    let domain = &builtin.domain;
    let mut state = builtin.initial.clone();
    report.final_state = state.clone();
    match decompose(gen, instruction, domain, &state, &builtin.goals) {
        Ok((plan, call)) => {
            report.plan = plan;
            report.decompose_call = Some(call);
        }
        Err(e) => {
            report.error = Some(e.info());
            return report;
        }
    }

    let attempts_allowed = gen.config.max_attempts.max(1);
    for index in 0..report.plan.subgoals.len() {
        let goal = report.plan.subgoals[index].clone();
        let mut success = false;
        let mut attempts = 0;
        let mut last_reason = String::new();
        let mut metrics = MetricsRecord::default();
        while attempts < attempts_allowed && !success {
            attempts += 1;
            let channel = feedback.as_mut().map(|c| &mut **c as &mut dyn FeedbackChannel);
            let (mut session, result) = gen.generate(scheme, &goal, &state, domain, channel);
            session.id = format!("{}-s{index}-a{attempts}", session.id);
            metrics = session.metrics.clone();
            match result {
                Ok(tree) => {
                    let trace = simulate(&tree, &state, domain, gen.config.tick_budget);
                    if trace.succeeded() && goal_satisfied(&trace.final_state, &goal).unwrap_or(false) {
                        state = trace.final_state;
                        success = true;
                    } else {
                        last_reason = trace
                            .failure_reason
                            .map_or("goal not reached".to_string(), |r| r.code().to_string());
                    }
                }
                Err(e) => last_reason = e.to_string(),
            }
            report.sessions.push(session);
        }
        report.records.push(SubgoalRecord {
            index,
            goal,
            attempts,
            success,
            metrics,
        });
        if !success {
            report.error = Some(
                SchemeError::RunAborted {
                    index,
                    reason: last_reason,
                }
                .info(),
            );
            break;
        }
        report.plan.cursor = index + 1;
    }
    report.final_state = state;
    report
}
