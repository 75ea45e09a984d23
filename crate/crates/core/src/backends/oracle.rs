//! Symbolic stand-in for a language model: breadth-first planning over
//! ground actions, exact state prediction, and template decomposition.

use std::collections::HashSet;

use super::{Backend, BackendError, Completion, Query, Request};
use crate::bt::{build_unit_subtree, emit_tree, BehaviorTree, BtNode};
use crate::domain::{goal_satisfied, DomainSpec, Goal, GroundAction, GroundPredicate, WorldState};
use crate::sim::replay;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_depth: usize,
    pub max_expansions: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_depth: 12,
            max_expansions: 200_000,
        }
    }
}

/// Shortest plan from `state` to `goal`; among shortest plans the
/// lexicographically smallest by (action name, args) wins.
pub fn oracle_make_plan(
    state: &WorldState,
    goal: &Goal,
    domain: &DomainSpec,
    limits: OracleLimits,
) -> Result<Vec<GroundAction>, BackendError> {
    domain
        .check_goal(goal)
        .map_err(|e| BackendError::Unsolvable(e.to_string()))?;
    let reached = |s: &WorldState| goal_satisfied(s, goal).map_err(|e| BackendError::Unsolvable(e.to_string()));
    if reached(state)? {
        return Ok(Vec::new());
    }
    let actions = domain.all_ground_actions();
    let mut seen = HashSet::new();
    seen.insert(state.facts.clone());
    // Parents are kept in lexicographic path order and children are generated
    // in sorted action order, so each level stays sorted.
    let mut frontier: Vec<(WorldState, Vec<usize>)> = vec![(state.clone(), Vec::new())];
    let mut expanded = 0usize;
    for _ in 0..limits.max_depth {
        let mut next = Vec::new();
        for (s, path) in &frontier {
            expanded += 1;
            if expanded > limits.max_expansions {
                return Err(BackendError::SearchBudgetExceeded { expanded: limits.max_expansions });
            }
            for (i, g) in actions.iter().enumerate() {
                if !g.preconditions.iter().all(|p| s.holds(p)) {
                    continue;
                }
                let mut child = s.clone();
                for d in &g.delete_effects {
                    child.facts.remove(d);
                }
                child.facts.extend(g.add_effects.iter().cloned());
                if !seen.insert(child.facts.clone()) {
                    continue;
                }
                let mut child_path = path.clone();
                child_path.push(i);
                if reached(&child)? {
                    return Ok(child_path.into_iter().map(|i| actions[i].action.clone()).collect());
                }
                next.push((child, child_path));
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Err(BackendError::Unsolvable(format!(
        "no plan for {goal} within {} steps",
        limits.max_depth
    )))
}

pub fn oracle_predict_state(
    state: &WorldState,
    plan: &[GroundAction],
    domain: &DomainSpec,
) -> Result<WorldState, BackendError> {
    match replay(state, plan, domain) {
        (end, None) => Ok(end),
        (_, Some(v)) => Err(BackendError::PreconditionViolation(v.error)),
    }
}

/// Back-chains `goal` into a tree using exact plans, mirroring the recursive
/// expansion scheme without going through text.
pub fn oracle_tree(
    goal: &Goal,
    state: &WorldState,
    domain: &DomainSpec,
    limits: OracleLimits,
) -> Result<BehaviorTree, BackendError> {
    fn expand(
        nodes: &mut [BtNode],
        state: &WorldState,
        domain: &DomainSpec,
        limits: OracleLimits,
        depth: usize,
    ) -> Result<(), BackendError> {
        let mut current = state.clone();
        for node in nodes.iter_mut() {
            let BtNode::Condition { predicate, .. } = node else { continue };
            let plan = oracle_make_plan(&current, &Goal::single(predicate.clone()), domain, limits)?;
            let Some(last) = plan.last() else { continue };
            if depth > limits.max_depth {
                return Err(BackendError::Unsolvable(format!("expansion deeper than {}", limits.max_depth)));
            }
            let after = oracle_predict_state(&current, &plan, domain)?;
            let unit = build_unit_subtree(last, domain).map_err(|e| BackendError::Unsolvable(e.to_string()))?;
            *node = unit.root;
            if let BtNode::Selector { children, .. } = node {
                if let Some(BtNode::Sequence { children: steps, .. }) = children.get_mut(1) {
                    expand(steps, &current, domain, limits, depth + 1)?;
                }
            }
            current = after;
        }
        Ok(())
    }
    let mut seed: Vec<BtNode> = goal.conjuncts.iter().cloned().map(BtNode::condition).collect();
    expand(&mut seed, state, domain, limits, 1)?;
    let root = if seed.len() == 1 {
        seed.pop().expect("one node")
    } else {
        BtNode::sequence(goal.conjunction_text(), seed)
    };
    Ok(BehaviorTree::with_goal(root, goal.clone()))
}

/// Turns an instruction into subgoal lines. "assemble ..." expands to the
/// benchmark goals; otherwise clauses like "insert X into Y" are mapped to
/// ground predicates. Clauses that match nothing are echoed unchanged.
pub fn oracle_decompose(instruction: &str, goals: &[Goal]) -> Vec<String> {
    let lower = instruction.trim().to_lowercase();
    if lower.is_empty() {
        return Vec::new();
    }
    if lower.starts_with("assemble") || lower.starts_with("build") {
        return goals.iter().map(Goal::conjunction_text).collect();
    }
    let clauses = lower
        .replace(" then ", ",")
        .replace(" and ", ",")
        .replace([';', '\n'], ",");
    clauses
        .split(',')
        .map(|c| c.trim().trim_end_matches('.').trim())
        .filter(|c| !c.is_empty())
        .map(|c| clause_predicate(c).map_or_else(|| c.to_string(), |p| p.to_string()))
        .collect()
}

fn clause_predicate(clause: &str) -> Option<GroundPredicate> {
    if clause.contains('(') {
        return clause.parse().ok();
    }
    let words: Vec<&str> = clause
        .split_whitespace()
        .filter(|w| !matches!(*w, "the" | "a" | "please"))
        .collect();
    let split_at = |preps: &[&str]| -> Option<(String, String)> {
        let at = words.iter().position(|w| preps.contains(w))?;
        let (x, y) = (&words[1..at], &words[at + 1..]);
        (!x.is_empty() && !y.is_empty()).then(|| (x.join("_"), y.join("_")))
    };
    let (name, preps): (&str, &[&str]) = match *words.first()? {
        "insert" => ("is_inserted_to", &["into", "in", "to"]),
        "screw" => ("is_screwed_to", &["into", "onto", "to", "in"]),
        "place" | "put" => ("is_placed_to", &["on", "onto", "to"]),
        _ => return None,
    };
    let (x, y) = split_at(preps)?;
    Some(GroundPredicate::new(name, [x, y]))
}

#[derive(Debug, Default)]
pub struct OracleBackend {
    pub limits: OracleLimits,
}

impl OracleBackend {
    pub fn new(limits: OracleLimits) -> Self {
        OracleBackend { limits }
    }
}

pub(crate) fn plan_document(plan: &[GroundAction]) -> String {
    serde_json::json!({ "plan": plan }).to_string()
}

impl Backend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        let text = match request.query {
            Query::MakePlan { goal, state, domain } => {
                plan_document(&oracle_make_plan(state, goal, domain, self.limits)?)
            }
            Query::PredictState { state, plan, domain } => oracle_predict_state(state, plan, domain)?.to_json(),
            Query::MakeTree { action, domain } => {
                let tree = build_unit_subtree(action, domain).map_err(|e| BackendError::Unsolvable(e.to_string()))?;
                emit_tree(&tree)
            }
            Query::GenerateTree { goal, state, domain } => {
                format!("```json\n{}```\n", emit_tree(&oracle_tree(goal, state, domain, self.limits)?))
            }
            Query::BulletPlan { goal, state, domain } => oracle_make_plan(state, goal, domain, self.limits)?
                .iter()
                .map(|a| format!("- {a}\n"))
                .collect(),
            Query::Decompose { instruction, goals, .. } => oracle_decompose(instruction, goals)
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{}. {l}\n", i + 1))
                .collect(),
            Query::Freeform => {
                return Err(BackendError::Unsupported {
                    backend: "oracle",
                    query: "freeform",
                })
            }
        };
        Ok(Completion::estimated(request.prompt, text, 0.0))
    }
}
