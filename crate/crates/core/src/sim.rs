//! Transition model and behavior-tree simulator.
//!
//! Actions are assumed to succeed instantly. Each root tick applies at most
//! one action and then the tree is re-ticked from the root, so the sequence
//! of fired actions is the tree's equivalent action sequence.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bt::{BehaviorTree, BtNode, NodeStatus, TreeError, ViolationCode};
use crate::domain::{DomainError, DomainSpec, GroundAction, GroundPredicate, WorldState};

pub const DEFAULT_TICK_BUDGET: usize = 100;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("preconditions of {action} not satisfied: {}", fmt_preds(.unmet))]
    PreconditionViolation {
        action: GroundAction,
        unmet: Vec<GroundPredicate>,
    },
}

pub(crate) fn fmt_preds(preds: &[GroundPredicate]) -> String {
    preds
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Closed set of failure reasons reported by the simulator and validators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureReason {
    NoStructuredBlock,
    MalformedStructure,
    UnknownAction,
    UnknownPredicate,
    UnknownObject,
    PreconditionViolation,
    TreeReturnedFailure,
    Stalled,
    BudgetExceeded,
    GoalNotReached,
}

impl FailureReason {
    pub fn code(&self) -> &'static str {
        match self {
            FailureReason::NoStructuredBlock => "NO_STRUCTURED_BLOCK",
            FailureReason::MalformedStructure => "MALFORMED_STRUCTURE",
            FailureReason::UnknownAction => "UNKNOWN_ACTION",
            FailureReason::UnknownPredicate => "UNKNOWN_PREDICATE",
            FailureReason::UnknownObject => "UNKNOWN_OBJECT",
            FailureReason::PreconditionViolation => "PRECONDITION_VIOLATION",
            FailureReason::TreeReturnedFailure => "TREE_RETURNED_FAILURE",
            FailureReason::Stalled => "STALLED",
            FailureReason::BudgetExceeded => "BUDGET_EXCEEDED",
            FailureReason::GoalNotReached => "GOAL_NOT_REACHED",
        }
    }

    /// The fixed feedback sentence for this reason, used when asking a
    /// generator to repair its tree.
    pub fn feedback_sentence(&self) -> &'static str {
        match self {
            FailureReason::NoStructuredBlock => {
                "The reply did not contain a behavior tree in the required JSON format."
            }
            FailureReason::MalformedStructure => {
                "The behavior tree does not follow the required JSON format: every node needs a valid kind, composites need at least one child, and leaves need a predicate or an action."
            }
            FailureReason::UnknownAction => {
                "The behavior tree uses an action that is not defined in the action knowledge or calls it with the wrong arguments."
            }
            FailureReason::UnknownPredicate => {
                "The behavior tree uses a condition predicate that is not defined in the domain or uses it with the wrong number of arguments."
            }
            FailureReason::UnknownObject => {
                "The behavior tree refers to an object that does not exist in the world state."
            }
            FailureReason::PreconditionViolation => {
                "During simulation an action node was reached while its preconditions were not satisfied, so the execution order is not logically coherent."
            }
            FailureReason::TreeReturnedFailure => {
                "During simulation the root of the behavior tree returned FAILURE before the goal was reached."
            }
            FailureReason::Stalled => {
                "During simulation the behavior tree kept ticking without changing the world state."
            }
            FailureReason::BudgetExceeded => {
                "During simulation the behavior tree did not terminate within the tick budget."
            }
            FailureReason::GoalNotReached => {
                "The behavior tree finished with SUCCESS but the goal condition is not satisfied in the final state."
            }
        }
    }

    pub fn from_violation(code: ViolationCode) -> Self {
        match code {
            ViolationCode::NoStructuredBlock => FailureReason::NoStructuredBlock,
            ViolationCode::MalformedStructure => FailureReason::MalformedStructure,
            ViolationCode::UnknownAction | ViolationCode::ArityMismatch | ViolationCode::TypeMismatch => {
                FailureReason::UnknownAction
            }
            ViolationCode::UnknownPredicate => FailureReason::UnknownPredicate,
            ViolationCode::UnknownObject => FailureReason::UnknownObject,
        }
    }

    pub fn from_tree_error(err: &TreeError) -> Self {
        match err {
            TreeError::NoStructuredBlock => FailureReason::NoStructuredBlock,
            TreeError::MalformedStructure { .. } => FailureReason::MalformedStructure,
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// An action reached while some of its preconditions were false.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionViolation {
    pub action: GroundAction,
    pub unmet: Vec<GroundPredicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub status: NodeStatus,
    /// Actions reached in firing order. A violating action is included as the
    /// last entry but its effects are not applied.
    pub fired: Vec<GroundAction>,
    pub violations: Vec<ActionViolation>,
    pub final_state: WorldState,
    pub failure_reason: Option<FailureReason>,
    pub ticks: usize,
}

impl SimTrace {
    pub fn succeeded(&self) -> bool {
        self.status == NodeStatus::Success
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Whether `action` can be applied in `state`, with the full list of unmet
/// preconditions when it cannot.
pub fn applicable(
    state: &WorldState,
    action: &GroundAction,
    domain: &DomainSpec,
) -> Result<(bool, Vec<GroundPredicate>), SimError> {
    let g = domain.ground_action(action)?;
    let unmet: Vec<GroundPredicate> = g
        .preconditions
        .into_iter()
        .filter(|p| !state.holds(p))
        .collect();
    Ok((unmet.is_empty(), unmet))
}

/// `facts' = (facts \ delete) ∪ add`; constraints are carried over untouched.
pub fn apply(state: &WorldState, action: &GroundAction, domain: &DomainSpec) -> Result<WorldState, SimError> {
    let g = domain.ground_action(action)?;
    let unmet: Vec<GroundPredicate> = g
        .preconditions
        .iter()
        .filter(|p| !state.holds(p))
        .cloned()
        .collect();
    if !unmet.is_empty() {
        return Err(SimError::PreconditionViolation {
            action: action.clone(),
            unmet,
        });
    }
    let mut next = state.clone();
    for d in &g.delete_effects {
        next.facts.remove(d);
    }
    next.facts.extend(g.add_effects);
    Ok(next)
}

/// First failing step of a replayed sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayViolation {
    pub index: usize,
    pub action: GroundAction,
    /// Unmet preconditions; empty when the action itself does not resolve.
    pub unmet: Vec<GroundPredicate>,
    pub error: String,
}

/// Folds [`apply`] over `seq`, stopping at the first violation.
pub fn replay(
    state: &WorldState,
    seq: &[GroundAction],
    domain: &DomainSpec,
) -> (WorldState, Option<ReplayViolation>) {
    let mut current = state.clone();
    for (index, action) in seq.iter().enumerate() {
        match apply(&current, action, domain) {
            Ok(next) => current = next,
            Err(e) => {
                let unmet = match &e {
                    SimError::PreconditionViolation { unmet, .. } => unmet.clone(),
                    SimError::Domain(_) => Vec::new(),
                };
                return (
                    current,
                    Some(ReplayViolation {
                        index,
                        action: action.clone(),
                        unmet,
                        error: e.to_string(),
                    }),
                );
            }
        }
    }
    (current, None)
}

enum Tick {
    Status(NodeStatus),
    Fired,
    Halt(FailureReason),
}

struct Run<'a> {
    domain: &'a DomainSpec,
    state: WorldState,
    fired: Vec<GroundAction>,
    violations: Vec<ActionViolation>,
}

impl Run<'_> {
    fn tick(&mut self, node: &BtNode) -> Tick {
        match node {
            BtNode::Condition { predicate, .. } => Tick::Status(if self.state.holds(predicate) {
                NodeStatus::Success
            } else {
                NodeStatus::Failure
            }),
            BtNode::Action { action, .. } => match apply(&self.state, action, self.domain) {
                Ok(next) => {
                    self.fired.push(action.clone());
                    self.state = next;
                    Tick::Fired
                }
                Err(SimError::PreconditionViolation { unmet, .. }) => {
                    self.fired.push(action.clone());
                    self.violations.push(ActionViolation {
                        action: action.clone(),
                        unmet,
                    });
                    Tick::Halt(FailureReason::PreconditionViolation)
                }
                Err(SimError::Domain(DomainError::UnknownObject(_))) => {
                    Tick::Halt(FailureReason::UnknownObject)
                }
                Err(SimError::Domain(_)) => Tick::Halt(FailureReason::UnknownAction),
            },
            BtNode::Sequence { children, .. } => {
                for c in children {
                    match self.tick(c) {
                        Tick::Status(NodeStatus::Success) => continue,
                        other => return other,
                    }
                }
                Tick::Status(NodeStatus::Success)
            }
            BtNode::Selector { children, .. } => {
                for c in children {
                    match self.tick(c) {
                        Tick::Status(NodeStatus::Failure) => continue,
                        other => return other,
                    }
                }
                Tick::Status(NodeStatus::Failure)
            }
        }
    }
}

/// Reactive execution of `tree` from `state`.
///
/// Terminates with SUCCESS when a root tick succeeds without firing an
/// action, with FAILURE when the root fails, an action is reached with unmet
/// preconditions, an action does not resolve against the domain, two
/// consecutive ticks leave the state unchanged, or `budget` ticks elapse.
pub fn simulate(tree: &BehaviorTree, state: &WorldState, domain: &DomainSpec, budget: usize) -> SimTrace {
    let mut run = Run {
        domain,
        state: state.clone(),
        fired: Vec::new(),
        violations: Vec::new(),
    };
    let mut ticks = 0;
    let mut unchanged_ticks = 0;
    let (status, reason) = loop {
        if ticks >= budget {
            break (NodeStatus::Failure, Some(FailureReason::BudgetExceeded));
        }
        ticks += 1;
        let before = run.state.clone();
        match run.tick(&tree.root) {
            Tick::Status(NodeStatus::Success) => break (NodeStatus::Success, None),
            Tick::Status(_) => break (NodeStatus::Failure, Some(FailureReason::TreeReturnedFailure)),
            Tick::Halt(reason) => break (NodeStatus::Failure, Some(reason)),
            Tick::Fired => {
                if run.state == before {
                    unchanged_ticks += 1;
                    if unchanged_ticks >= 2 {
                        break (NodeStatus::Failure, Some(FailureReason::Stalled));
                    }
                } else {
                    unchanged_ticks = 0;
                }
            }
        }
    };
    SimTrace {
        status,
        fired: run.fired,
        violations: run.violations,
        final_state: run.state,
        failure_reason: reason,
        ticks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt::{parse_tree, BtNode};
    use crate::data;
    use crate::domain::{builtin_domain, goal_satisfied, BuiltinDomain, Goal};

    fn gearset() -> BuiltinDomain {
        builtin_domain("gearset").unwrap()
    }

    fn a(s: &str) -> GroundAction {
        s.parse().unwrap()
    }

    fn p(s: &str) -> GroundPredicate {
        s.parse().unwrap()
    }

    fn paper_sequence() -> Vec<GroundAction> {
        vec![
            a("put_down(left_hand, parallelgripper, shaft3)"),
            a("change_tool(left_hand, parallelgripper, clampgripper)"),
            a("pick_up(left_hand, clampgripper, gear1)"),
            a("insert(left_hand, clampgripper, gear1, shaft1)"),
        ]
    }

    #[test]
    fn change_tool_blocked_until_put_down() {
        let g = gearset();
        let change = a("change_tool(left_hand, parallelgripper, clampgripper)");
        let (ok, unmet) = applicable(&g.initial, &change, &g.domain).unwrap();
        assert!(!ok);
        assert_eq!(unmet, vec![p("is_empty(parallelgripper)")]);
        let s1 = apply(&g.initial, &paper_sequence()[0], &g.domain).unwrap();
        assert_eq!(applicable(&s1, &change, &g.domain).unwrap(), (true, vec![]));
        assert!(matches!(
            applicable(&g.initial, &a("grab(left_hand)"), &g.domain),
            Err(SimError::Domain(DomainError::UnknownAction(_)))
        ));
    }

    #[test]
    fn no_precondition_action_always_applicable() {
        let d = crate::domain::load_domain(
            r#"{"id":"t","objects":{"t1":"tool"},"properties":{"is_empty":1},
               "actions":{"reset":{"params":[{"name":"t","type":"tool"}],"add":["is_empty(?t)"]}}}"#,
        )
        .unwrap();
        assert_eq!(
            applicable(&WorldState::default(), &a("reset(t1)"), &d).unwrap(),
            (true, vec![])
        );
    }

    #[test]
    fn put_down_effects() {
        let g = gearset();
        let s1 = apply(&g.initial, &paper_sequence()[0], &g.domain).unwrap();
        assert!(!s1.holds(&p("hold(parallelgripper, shaft3)")));
        assert!(s1.holds(&p("is_empty(parallelgripper)")));
        assert_eq!(s1.constraints, g.initial.constraints);
        // frame: everything else unchanged
        let changed: Vec<_> = g.initial.facts.symmetric_difference(&s1.facts).collect();
        assert_eq!(changed.len(), 2);
    }

    #[test]
    fn inapplicable_apply_is_violation() {
        let g = gearset();
        let err = apply(&g.initial, &paper_sequence()[2], &g.domain).unwrap_err();
        assert!(matches!(err, SimError::PreconditionViolation { .. }));
    }

    #[test]
    fn paper_sequence_replays() {
        let g = gearset();
        let (end, violation) = replay(&g.initial, &paper_sequence(), &g.domain);
        assert!(violation.is_none());
        assert!(goal_satisfied(&end, &Goal::single(p("is_inserted_to(gear1, shaft1)"))).unwrap());
        assert_eq!(replay(&g.initial, &[], &g.domain), (g.initial.clone(), None));
    }

    #[test]
    fn duplicate_pick_up_violates() {
        let g = gearset();
        let mut seq = paper_sequence()[..3].to_vec();
        seq.push(a("pick_up(left_hand, clampgripper, gear1)"));
        let (_, v) = replay(&g.initial, &seq, &g.domain);
        let v = v.unwrap();
        assert_eq!(v.index, 3);
        assert_eq!(v.unmet, vec![p("is_empty(clampgripper)")]);
    }

    #[test]
    fn reference_simulates_to_success() {
        let g = gearset();
        let tree = parse_tree(data::REFERENCE_TREE).unwrap();
        let trace = simulate(&tree, &g.initial, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.status, NodeStatus::Success);
        assert_eq!(trace.fired, paper_sequence());
        assert!(trace.violations.is_empty());
        assert_eq!(trace.ticks, 5);
        assert!(trace.final_state.holds(&p("is_inserted_to(gear1, shaft1)")));
    }

    #[test]
    fn satisfied_root_fires_nothing() {
        let g = gearset();
        let tree = BehaviorTree::new(BtNode::condition(p("hold(left_hand, parallelgripper)")));
        let trace = simulate(&tree, &g.initial, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.status, NodeStatus::Success);
        assert!(trace.fired.is_empty());
    }

    #[test]
    fn swapped_actions_violate() {
        let g = gearset();
        let mut tree = parse_tree(data::REFERENCE_TREE).unwrap();
        swap_actions(&mut tree.root, &a("put_down(left_hand, parallelgripper, shaft3)"), &a("pick_up(left_hand, clampgripper, gear1)"));
        let trace = simulate(&tree, &g.initial, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.status, NodeStatus::Failure);
        assert_eq!(trace.failure_reason, Some(FailureReason::PreconditionViolation));
        let (_, v) = replay(&g.initial, &trace.fired, &g.domain);
        let v = v.unwrap();
        assert_eq!(v.unmet, trace.violations[0].unmet);
        assert!(v.unmet.contains(&p("hold(left_hand, clampgripper)")));
    }

    fn swap_actions(node: &mut BtNode, x: &GroundAction, y: &GroundAction) {
        match node {
            BtNode::Action { action, name } => {
                if action == x {
                    *action = y.clone();
                    *name = y.to_string();
                } else if action == y {
                    *action = x.clone();
                    *name = x.to_string();
                }
            }
            BtNode::Selector { children, .. } | BtNode::Sequence { children, .. } => {
                children.iter_mut().for_each(|c| swap_actions(c, x, y))
            }
            BtNode::Condition { .. } => {}
        }
    }

    #[test]
    fn noop_loop_stalls() {
        let g = gearset();
        let mut s = g.initial.clone();
        s.facts.remove(&p("hold(parallelgripper, shaft3)"));
        s.facts.insert(p("is_empty(parallelgripper)"));
        // change_tool to the same tool never changes the state
        let tree = BehaviorTree::new(BtNode::selector(
            "",
            vec![
                BtNode::condition(p("hold(left_hand, clampgripper)")),
                BtNode::action(a("change_tool(left_hand, parallelgripper, parallelgripper)")),
            ],
        ));
        let trace = simulate(&tree, &s, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.failure_reason, Some(FailureReason::Stalled));
        assert_eq!(trace.ticks, 2);
    }

    #[test]
    fn oscillation_hits_budget() {
        let g = gearset();
        let mut s = g.initial.clone();
        s.facts.remove(&p("hold(parallelgripper, shaft3)"));
        s.facts.insert(p("is_empty(parallelgripper)"));
        let tree = BehaviorTree::new(BtNode::selector(
            "",
            vec![
                BtNode::condition(p("hold(left_hand, inwardgripper)")),
                BtNode::sequence(
                    "",
                    vec![
                        BtNode::condition(p("hold(left_hand, parallelgripper)")),
                        BtNode::action(a("change_tool(left_hand, parallelgripper, clampgripper)")),
                    ],
                ),
                BtNode::action(a("change_tool(left_hand, clampgripper, parallelgripper)")),
            ],
        ));
        let trace = simulate(&tree, &s, &g.domain, 10);
        assert_eq!(trace.failure_reason, Some(FailureReason::BudgetExceeded));
        assert_eq!(trace.ticks, 10);
        assert!(trace.fired.len() <= 10);
    }

    #[test]
    fn unknown_action_halts() {
        let g = gearset();
        let tree = BehaviorTree::new(BtNode::action(a("grab(left_hand, gear1)")));
        let trace = simulate(&tree, &g.initial, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.failure_reason, Some(FailureReason::UnknownAction));
        assert!(trace.fired.is_empty());
    }

    #[test]
    fn root_failure() {
        let g = gearset();
        let tree = BehaviorTree::new(BtNode::condition(p("hold(left_hand, clampgripper)")));
        let trace = simulate(&tree, &g.initial, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.failure_reason, Some(FailureReason::TreeReturnedFailure));
    }
}
