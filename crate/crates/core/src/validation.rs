//! Exec / LC / SR verdicts and the GD / TC accounting record.

use serde::{Deserialize, Serialize};

use crate::bt::{
    canonicalize, extract_tree_from_model_output, recover_tree_lenient, well_formed, BehaviorTree,
    ExecReport,
};
use crate::domain::{goal_satisfied, DomainSpec, Goal, GroundAction, WorldState};
use crate::sim::{replay, simulate, FailureReason, SimTrace, DEFAULT_TICK_BUDGET};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecVerdict {
    pub pass: bool,
    pub tree: Option<BehaviorTree>,
    pub report: ExecReport,
}

impl ExecVerdict {
    pub fn failure_reasons(&self) -> Vec<FailureReason> {
        let mut out: Vec<FailureReason> = Vec::new();
        for v in &self.report.violations {
            let r = FailureReason::from_violation(v.code);
            if !out.contains(&r) {
                out.push(r);
            }
        }
        out
    }
}

/// Strict format check of a raw completion: a structured block must parse
/// and every symbol must resolve against `domain`.
pub fn check_exec(raw: &str, domain: &DomainSpec) -> ExecVerdict {
    match extract_tree_from_model_output(raw) {
        Ok(tree) => {
            let tree = canonicalize(&tree, domain);
            let report = well_formed(&tree, domain);
            ExecVerdict {
                pass: report.pass(),
                tree: Some(tree),
                report,
            }
        }
        Err(e) => ExecVerdict {
            pass: false,
            tree: None,
            report: ExecReport::from_tree_error(&e),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcVerdict {
    pub pass: bool,
    pub fired: Vec<GroundAction>,
    pub trace: SimTrace,
}

/// Logical coherence: the tree's equivalent action sequence runs without a
/// precondition violation, and sequential replay of that sequence agrees
/// with the simulator.
pub fn check_lc(tree: &BehaviorTree, initial: &WorldState, domain: &DomainSpec) -> LcVerdict {
    let trace = simulate(tree, initial, domain, DEFAULT_TICK_BUDGET);
    let (end, violation) = replay(initial, &trace.fired, domain);
    let resolves = !matches!(
        trace.failure_reason,
        Some(FailureReason::UnknownAction | FailureReason::UnknownObject)
    );
    let pass = resolves && trace.violations.is_empty() && violation.is_none() && end == trace.final_state;
    LcVerdict {
        pass,
        fired: trace.fired.clone(),
        trace,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrVerdict {
    pub pass: bool,
    pub exec: bool,
    pub lc: bool,
    pub trace: SimTrace,
    pub failure_reasons: Vec<FailureReason>,
}

/// Success: well-formed, coherent, the simulation ends in SUCCESS and the
/// final state satisfies `goal`.
pub fn check_sr(tree: &BehaviorTree, initial: &WorldState, goal: &Goal, domain: &DomainSpec) -> SrVerdict {
    let report = well_formed(tree, domain);
    let exec = report.pass();
    let lc = check_lc(tree, initial, domain);
    let mut reasons: Vec<FailureReason> = Vec::new();
    for v in &report.violations {
        let r = FailureReason::from_violation(v.code);
        if !reasons.contains(&r) {
            reasons.push(r);
        }
    }
    if let Some(r) = lc.trace.failure_reason {
        if !reasons.contains(&r) {
            reasons.push(r);
        }
    }
    let reached = goal_satisfied(&lc.trace.final_state, goal).unwrap_or(false);
    if lc.trace.succeeded() && !reached {
        reasons.push(FailureReason::GoalNotReached);
    }
    SrVerdict {
        pass: exec && lc.pass && lc.trace.succeeded() && reached,
        exec,
        lc: lc.pass,
        trace: lc.trace,
        failure_reasons: reasons,
    }
}

/// Per-sample metrics. `gd_seconds` excludes time spent waiting for human
/// feedback; `wall_seconds` includes it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sr: bool,
    pub lc: bool,
    pub exec: bool,
    pub gd_seconds: f64,
    pub wall_seconds: f64,
    pub tc_tokens: u64,
    pub failure_reasons: Vec<FailureReason>,
}

impl MetricsRecord {
    pub fn verdicts_consistent(&self) -> bool {
        !self.sr || (self.lc && self.exec)
    }
}

/// Scores a tree whose Exec verdict was decided elsewhere. LC and SR are
/// computed on `tree`, which may be a leniently recovered tree.
pub fn score(
    tree: Option<&BehaviorTree>,
    exec: bool,
    mut reasons: Vec<FailureReason>,
    initial: &WorldState,
    goal: &Goal,
    domain: &DomainSpec,
) -> MetricsRecord {
    let Some(tree) = tree else {
        return MetricsRecord {
            exec,
            failure_reasons: reasons,
            ..Default::default()
        };
    };
    let sr = check_sr(tree, initial, goal, domain);
    for r in sr.failure_reasons {
        if !reasons.contains(&r) {
            reasons.push(r);
        }
    }
    MetricsRecord {
        sr: exec && sr.pass,
        lc: sr.lc,
        exec,
        failure_reasons: reasons,
        ..Default::default()
    }
}

/// Full verdict for one completion. When the strict format check fails, LC
/// is judged on a leniently recovered tree (if any).
pub fn evaluate_completion(raw: &str, initial: &WorldState, goal: &Goal, domain: &DomainSpec) -> MetricsRecord {
    let exec = check_exec(raw, domain);
    let reasons = exec.failure_reasons();
    if exec.pass {
        return score(exec.tree.as_ref(), true, reasons, initial, goal, domain);
    }
    let recovered = exec
        .tree
        .clone()
        .or_else(|| recover_tree_lenient(raw))
        .map(|t| canonicalize(&t, domain));
    score(recovered.as_ref(), false, reasons, initial, goal, domain)
}

/// Fallback token count when a backend reports no usage.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
