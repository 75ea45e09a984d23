//! Recursive behavior-tree expansion through MakePlan, PredictState and
//! MakeTree queries.
//!
//! Starting from a single condition on the subgoal, every condition node
//! whose plan is non-empty is replaced by the unit subtree of the plan's
//! last action, and the expansion recurses into that subtree's precondition
//! conditions. The children are planned from the state the parent plan
//! started in; the next sibling continues from the predicted state after
//! the parent plan.

use serde::Deserialize;
use serde_json::Value;

use super::{Generator, Run, Scheme, SchemeError, SchemeResult, UnitSample};
use crate::backends::Query;
use crate::bt::{build_unit_subtree, canonicalize, emit_tree, extract_tree_from_model_output, well_formed, BehaviorTree, BtNode};
use crate::domain::{parse_state_triples, render_pddl_like, render_state_triples, DomainSpec, Goal, GroundAction, WorldState};
use crate::extract::first_block;
use crate::sim::FailureReason;
use crate::validation::{score, MetricsRecord};

/// A parsed reply and whether it met the strict format on its own.
struct Parsed<T> {
    value: T,
    strict: bool,
}

fn invalid(kind: &str, reason: impl Into<String>) -> SchemeError {
    SchemeError::InvalidReply {
        kind: kind.to_string(),
        reason: reason.into(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    plan: Vec<GroundAction>,
}

/// Strict form is `{"plan": [{"name": ..., "args": [...]}, ...]}`. A bare
/// list, or actions written as `name(args)` strings, are accepted leniently.
fn parse_plan(text: &str) -> Result<Parsed<Vec<GroundAction>>, SchemeError> {
    let block = first_block(text).ok_or_else(|| invalid("make_plan", "no structured block"))?;
    if let Ok(doc) = serde_json::from_str::<PlanDoc>(block.body) {
        return Ok(Parsed {
            value: doc.plan.iter().map(GroundAction::normalized).collect(),
            strict: true,
        });
    }
    let value: Value = serde_json::from_str(block.body).map_err(|e| invalid("make_plan", e.to_string()))?;
    let items = match &value {
        Value::Array(items) => items,
        Value::Object(o) => o
            .get("plan")
            .and_then(Value::as_array)
            .ok_or_else(|| invalid("make_plan", "missing plan list"))?,
        _ => return Err(invalid("make_plan", "expected a list of actions")),
    };
    let plan = items
        .iter()
        .map(|item| match item {
            Value::String(s) => s.parse::<GroundAction>().map_err(|e| invalid("make_plan", e.to_string())),
            other => {
                let name = other.get("name").and_then(Value::as_str);
                let args = other.get("args").and_then(Value::as_array);
                match (name, args) {
                    (Some(n), Some(a)) => Ok(GroundAction::new(n, a.iter().filter_map(Value::as_str))),
                    _ => Err(invalid("make_plan", format!("unreadable action {other}"))),
                }
            }
        })
        .map(|r| r.map(|a| a.normalized()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Parsed { value: plan, strict: false })
}

/// Strict form is the state document. A triple listing is accepted
/// leniently. Constraints always carry over from `previous`.
fn parse_state(text: &str, previous: &WorldState) -> Result<Parsed<WorldState>, SchemeError> {
    let strict = first_block(text).and_then(|b| WorldState::from_json(b.body).ok());
    let (mut state, strict) = match strict {
        Some(s) => (s, true),
        None => (
            parse_state_triples(text).map_err(|e| invalid("predict_state", e.to_string()))?,
            false,
        ),
    };
    state.constraints = previous.constraints.clone();
    Ok(Parsed { value: state, strict })
}

struct Expansion<'d> {
    domain: &'d DomainSpec,
    domain_text: String,
    max_depth: usize,
    /// Every reply so far met the strict format on the first attempt.
    strict: bool,
}

impl Generator<'_> {
    pub fn recursive(&self, subgoal: &Goal, initial: &WorldState, domain: &DomainSpec) -> SchemeResult {
        let mut run = self.start(Scheme::Recursive, subgoal, domain);
        let mut x = Expansion {
            domain,
            domain_text: render_pddl_like(domain),
            max_depth: self.config.max_depth.max(1),
            strict: true,
        };
        let mut seed: Vec<BtNode> = subgoal.conjuncts.iter().cloned().map(BtNode::condition).collect();
        if let Err(e) = self.expand(&mut run, &mut x, &mut seed, initial, 1) {
            return run.finish(Err(e), MetricsRecord::default());
        }
        let root = if seed.len() == 1 {
            seed.pop().expect("one seed node")
        } else {
            BtNode::sequence(subgoal.conjunction_text(), seed)
        };
        let tree = BehaviorTree::with_goal(root, subgoal.clone());
        let report = well_formed(&tree, domain);
        let exec = x.strict && report.pass();
        let mut reasons: Vec<FailureReason> = Vec::new();
        if !x.strict {
            reasons.push(FailureReason::MalformedStructure);
        }
        for v in &report.violations {
            let r = FailureReason::from_violation(v.code);
            if !reasons.contains(&r) {
                reasons.push(r);
            }
        }
        let metrics = score(Some(&tree), exec, reasons, initial, subgoal, domain);
        let document = emit_tree(&tree);
        run.candidate(&document, Some(&tree), exec);
        let trace = crate::sim::simulate(&tree, initial, domain, self.config.tick_budget);
        run.simulated(&trace);
        run.finish(Ok(tree), metrics)
    }

    fn expand(
        &self,
        run: &mut Run<'_, '_>,
        x: &mut Expansion<'_>,
        nodes: &mut [BtNode],
        state: &WorldState,
        depth: usize,
    ) -> Result<(), SchemeError> {
        let mut current = state.clone();
        for node in nodes.iter_mut() {
            let BtNode::Condition { predicate, .. } = node else { continue };
            let goal = Goal::single(predicate.clone());
            let plan = self.make_plan(run, x, &current, &goal)?;
            let Some(action) = plan.last().cloned() else { continue };
            if depth > x.max_depth {
                return Err(SchemeError::DepthLimitExceeded { max_depth: x.max_depth });
            }
            let after = self.predict_state(run, x, &current, &plan)?;
            let unit = self.make_tree(run, x, &action)?;
            *node = unit.root;
            if let BtNode::Selector { children, .. } = node {
                if let Some(BtNode::Sequence { children: steps, .. }) = children.get_mut(1) {
                    self.expand(run, x, steps, &current, depth + 1)?;
                }
            }
            current = after;
        }
        Ok(())
    }

    fn make_plan(
        &self,
        run: &mut Run<'_, '_>,
        x: &mut Expansion<'_>,
        state: &WorldState,
        goal: &Goal,
    ) -> Result<Vec<GroundAction>, SchemeError> {
        let state_text = render_state_triples(state);
        let prompt = self.render(
            "make_plan",
            &[("domain", &x.domain_text), ("state", &state_text), ("subgoal", &goal.conjunction_text())],
        )?;
        let query = Query::MakePlan {
            goal,
            state,
            domain: x.domain,
        };
        let reply = run.call("make_plan", prompt, query)?;
        let parsed = parse_plan(&reply.text)?;
        x.strict &= parsed.strict;
        Ok(parsed.value)
    }

    fn predict_state(
        &self,
        run: &mut Run<'_, '_>,
        x: &mut Expansion<'_>,
        state: &WorldState,
        plan: &[GroundAction],
    ) -> Result<WorldState, SchemeError> {
        let state_text = render_state_triples(state);
        let plan_text: String = plan.iter().enumerate().map(|(i, a)| format!("{}. {a}\n", i + 1)).collect();
        let prompt = self.render(
            "predict_state",
            &[("domain", &x.domain_text), ("state", &state_text), ("plan", plan_text.trim_end())],
        )?;
        let query = Query::PredictState {
            state,
            plan,
            domain: x.domain,
        };
        let reply = run.call("predict_state", prompt, query)?;
        let parsed = parse_state(&reply.text, state)?;
        x.strict &= parsed.strict;
        Ok(parsed.value)
    }

    /// Asks for the unit subtree of `action`; the answer must match the
    /// reference shape up to labels. One repair prompt is allowed.
    fn make_tree(
        &self,
        run: &mut Run<'_, '_>,
        x: &mut Expansion<'_>,
        action: &GroundAction,
    ) -> Result<BehaviorTree, SchemeError> {
        let expected = build_unit_subtree(action, x.domain).map_err(|e| SchemeError::InvalidSubtree {
            action: action.to_string(),
            reason: e.to_string(),
        })?;
        let prompt_for = |feedback: &str| {
            self.render(
                "make_tree",
                &[
                    ("domain", &x.domain_text),
                    ("format_rules", self.config.templates.get("format_rules")),
                    ("action", &action.to_string()),
                    ("feedback", feedback),
                ],
            )
        };
        let first_prompt = prompt_for("")?;
        let mut prompt = first_prompt.clone();
        let mut problem = String::new();
        for attempt in 0..2 {
            let query = Query::MakeTree {
                action,
                domain: x.domain,
            };
            let reply = run.call("make_tree", prompt.clone(), query)?;
            match extract_tree_from_model_output(&reply.text) {
                Ok(tree) => {
                    let tree = canonicalize(&tree, x.domain);
                    if tree.equal_up_to_labels(&expected) {
                        run.session.unit_trees.push(UnitSample {
                            action: action.clone(),
                            prompt: first_prompt,
                            completion: emit_tree(&tree),
                        });
                        return Ok(BehaviorTree::with_goal(tree.root, expected.goal.clone().unwrap_or_default()));
                    }
                    problem = format!(
                        "The subtree does not have the required shape. Expected the selector over {} with the preconditions of {action} in declared order.",
                        expected.root.name()
                    );
                }
                Err(e) => problem = e.to_string(),
            }
            x.strict = false;
            if attempt == 0 {
                let fb = self.feedback_block("make_tree_repair", std::slice::from_ref(&problem))?;
                prompt = prompt_for(&fb)?;
            }
        }
        Err(SchemeError::InvalidSubtree {
            action: action.to_string(),
            reason: problem,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{OracleBackend, ScriptedBackend};
    use crate::data;
    use crate::domain::builtin_domain;
    use crate::sim::{replay, simulate, DEFAULT_TICK_BUDGET};

    fn goal1() -> Goal {
        Goal::parse("is_inserted_to(gear1, shaft1)").unwrap()
    }

    #[test]
    fn oracle_expansion_reproduces_reference_tree() {
        let g = builtin_domain("gearset").unwrap();
        let oracle = OracleBackend::default();
        let (session, result) = Generator::new(&oracle).recursive(&goal1(), &g.initial, &g.domain);
        let tree = result.unwrap();
        assert_eq!(emit_tree(&tree), data::REFERENCE_TREE);
        let trace = simulate(&tree, &g.initial, &g.domain, DEFAULT_TICK_BUDGET);
        assert_eq!(trace.fired.len(), 4);
        assert!(session.metrics.sr && session.metrics.exec);
        let make_tree_calls = session.calls.iter().filter(|c| c.kind == "make_tree").count();
        assert_eq!(make_tree_calls, tree.action_leaf_count());
        assert_eq!(session.unit_trees.len(), 4);
    }

    #[test]
    fn satisfied_subgoal_stays_a_condition() {
        let g = builtin_domain("gearset").unwrap();
        let oracle = OracleBackend::default();
        let goal = Goal::parse("hold(left_hand, parallelgripper)").unwrap();
        let (session, result) = Generator::new(&oracle).recursive(&goal, &g.initial, &g.domain);
        assert_eq!(result.unwrap().root.node_count(), 1);
        assert!(session.calls.iter().all(|c| c.kind == "make_plan"));
    }

    #[test]
    fn depth_limit() {
        let g = builtin_domain("gearset").unwrap();
        let oracle = OracleBackend::default();
        let mut gen = Generator::new(&oracle);
        gen.config.max_depth = 1;
        let (_, result) = gen.recursive(&goal1(), &g.initial, &g.domain);
        assert_eq!(result.unwrap_err(), SchemeError::DepthLimitExceeded { max_depth: 1 });
    }

    #[test]
    fn predicted_states_follow_replay() {
        let g = builtin_domain("gearset").unwrap();
        let oracle = OracleBackend::default();
        let (session, _) = Generator::new(&oracle).recursive(&goal1(), &g.initial, &g.domain);
        let first_plan = parse_plan(&session.calls[0].completion).unwrap().value;
        let predicted = parse_state(&session.calls[1].completion, &g.initial).unwrap().value;
        assert_eq!(replay(&g.initial, &first_plan, &g.domain).0, predicted);
    }

    #[test]
    fn wrong_subtree_gets_one_repair() {
        let g = builtin_domain("gearset").unwrap();
        let goal = Goal::parse("is_empty(parallelgripper)").unwrap();
        let plan = r#"{"plan":[{"name":"put_down","args":["left_hand","parallelgripper","shaft3"]}]}"#;
        let state = {
            let mut s = g.initial.clone();
            s.facts.remove(&"hold(parallelgripper, shaft3)".parse().unwrap());
            s.facts.insert("is_empty(parallelgripper)".parse().unwrap());
            s.to_json()
        };
        let wrong = r#"{"kind":"action","name":"x","action":{"name":"put_down","args":["left_hand","parallelgripper","shaft3"]}}"#;
        let right = emit_tree(&build_unit_subtree(&"put_down(left_hand, parallelgripper, shaft3)".parse().unwrap(), &g.domain).unwrap());
        let empty = r#"{"plan":[]}"#;
        let backend = ScriptedBackend::from_replies([plan, &state, wrong, &right, empty, empty]);
        let (session, result) = Generator::new(&backend).recursive(&goal, &g.initial, &g.domain);
        assert!(result.is_ok(), "{:?}", session.error);
        assert!(session.calls[3].prompt.contains("required shape"));
        assert!(!session.metrics.exec);
        assert!(session.metrics.lc);

        let backend = ScriptedBackend::from_replies([plan, &state, wrong, wrong]);
        let (_, result) = Generator::new(&backend).recursive(&goal, &g.initial, &g.domain);
        assert_eq!(result.unwrap_err().code(), "INVALID_SUBTREE");
    }

    #[test]
    fn lenient_plan_forms() {
        let p = parse_plan("[\"put_down(left_hand, parallelgripper, shaft3)\"]").unwrap();
        assert!(!p.strict);
        assert_eq!(p.value.len(), 1);
        let p = parse_plan("{\"plan\": []}").unwrap();
        assert!(p.strict && p.value.is_empty());
        assert!(parse_plan("nothing here").is_err());
    }
}
