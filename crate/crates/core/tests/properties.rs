//! Property tests over random unit-subtree compositions and random states.

use std::sync::OnceLock;

use btforge::backends::{oracle_make_plan, OracleLimits};
use btforge::bt::{build_unit_subtree, emit_tree, parse_tree, well_formed, BehaviorTree, BtNode};
use btforge::domain::{
    builtin_domain, goal_satisfied, parse_state_triples, render_state_triples, BuiltinDomain, Goal, GroundAction,
    Grounding, WorldState,
};
use btforge::sim::{apply, replay, simulate, DEFAULT_TICK_BUDGET};
use btforge::validation::evaluate_completion;
use proptest::prelude::*;

struct Fixture {
    builtin: BuiltinDomain,
    ground: Vec<Grounding>,
}

fn fixture(id: usize) -> &'static Fixture {
    static FIX: OnceLock<Vec<Fixture>> = OnceLock::new();
    &FIX.get_or_init(|| {
        ["gearset", "chair", "lamp"]
            .iter()
            .map(|d| {
                let builtin = builtin_domain(d).unwrap();
                let ground = builtin.domain.all_ground_actions();
                Fixture { builtin, ground }
            })
            .collect()
    })[id]
}

/// Walks `choices` through applicable actions, giving a reachable state.
fn walk(fx: &Fixture, choices: &[usize]) -> WorldState {
    let mut s = fx.builtin.initial.clone();
    for c in choices {
        let options: Vec<&Grounding> = fx
            .ground
            .iter()
            .filter(|g| g.preconditions.iter().all(|p| s.holds(p)))
            .collect();
        if options.is_empty() {
            break;
        }
        s = apply(&s, &options[c % options.len()].action, &fx.builtin.domain).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
enum Shape {
    Unit(usize),
    /// A unit subtree with one precondition check removed.
    Stripped(usize, usize),
    Seq(Vec<Shape>),
    Sel(Vec<Shape>),
}

fn shape() -> impl Strategy<Value = Shape> {
    let leaf = prop_oneof![
        3 => any::<usize>().prop_map(Shape::Unit),
        1 => (any::<usize>(), any::<usize>()).prop_map(|(a, k)| Shape::Stripped(a, k)),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(Shape::Seq),
            prop::collection::vec(inner, 1..4).prop_map(Shape::Sel),
        ]
    })
}

fn build(fx: &Fixture, s: &Shape) -> BtNode {
    match s {
        Shape::Unit(i) => {
            let action = &fx.ground[i % fx.ground.len()].action;
            build_unit_subtree(action, &fx.builtin.domain).unwrap().root
        }
        Shape::Stripped(i, k) => {
            let mut root = build(fx, &Shape::Unit(*i));
            if let BtNode::Selector { children, .. } = &mut root {
                if let BtNode::Sequence { children: steps, .. } = &mut children[1] {
                    if steps.len() > 1 {
                        steps.remove(k % (steps.len() - 1));
                    }
                }
            }
            root
        }
        Shape::Seq(cs) => BtNode::sequence("seq", cs.iter().map(|c| build(fx, c)).collect()),
        Shape::Sel(cs) => BtNode::selector("sel", cs.iter().map(|c| build(fx, c)).collect()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn simulation_agrees_with_replay(d in 0usize..3, sh in shape(), start in prop::collection::vec(any::<usize>(), 0..4)) {
        let fx = fixture(d);
        let tree = BehaviorTree::new(build(fx, &sh));
        prop_assert!(well_formed(&tree, &fx.builtin.domain).pass());
        let init = walk(fx, &start);
        let trace = simulate(&tree, &init, &fx.builtin.domain, DEFAULT_TICK_BUDGET);
        let (end, violation) = replay(&init, &trace.fired, &fx.builtin.domain);
        prop_assert_eq!(&end, &trace.final_state);
        let first = trace.violations.first().map(|v| (v.action.clone(), v.unmet.clone()));
        prop_assert_eq!(first, violation.map(|v| (v.action, v.unmet)));
    }
}

/// Same check driven by a seeded generator, so the agreement count and the
/// number of violating runs can be asserted.
#[test]
fn simulation_agrees_with_replay_seeded() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]));
    let strategy = (0usize..3, shape(), prop::collection::vec(any::<usize>(), 0..4));
    let (mut agree, mut violating) = (0, 0);
    for _ in 0..500 {
        let (d, sh, start) = strategy.new_tree(&mut runner).unwrap().current();
        let fx = fixture(d);
        let tree = BehaviorTree::new(build(fx, &sh));
        let init = walk(fx, &start);
        let trace = simulate(&tree, &init, &fx.builtin.domain, DEFAULT_TICK_BUDGET);
        let (end, violation) = replay(&init, &trace.fired, &fx.builtin.domain);
        let first = trace.violations.first().map(|v| (v.action.clone(), v.unmet.clone()));
        if end == trace.final_state && first == violation.map(|v| (v.action, v.unmet)) {
            agree += 1;
        }
        violating += usize::from(!trace.violations.is_empty());
    }
    assert_eq!(agree, 500);
    assert!(violating > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn emit_then_parse_is_identity(d in 0usize..3, sh in shape()) {
        let fx = fixture(d);
        let tree = BehaviorTree::new(build(fx, &sh));
        prop_assert_eq!(parse_tree(&emit_tree(&tree)).unwrap(), tree);
    }

    #[test]
    fn unknown_action_breaks_well_formedness(d in 0usize..3, sh in shape(), pick in any::<usize>()) {
        let fx = fixture(d);
        let mut tree = BehaviorTree::new(build(fx, &sh));
        let n = tree.action_leaf_count();
        let mut seen = 0;
        rename_nth(&mut tree.root, pick % n, &mut seen);
        prop_assert!(!well_formed(&tree, &fx.builtin.domain).pass());
    }

    #[test]
    fn apply_touches_only_effects(d in 0usize..3, start in prop::collection::vec(any::<usize>(), 0..5), pick in any::<usize>()) {
        let fx = fixture(d);
        let s = walk(fx, &start);
        let g = &fx.ground[pick % fx.ground.len()];
        match apply(&s, &g.action, &fx.builtin.domain) {
            Ok(next) => {
                prop_assert_eq!(&next.constraints, &s.constraints);
                for f in s.facts.iter().chain(next.facts.iter()) {
                    let touched = g.add_effects.contains(f) || g.delete_effects.contains(f);
                    if !touched {
                        prop_assert_eq!(s.facts.contains(f), next.facts.contains(f));
                    }
                }
                for a in &g.add_effects {
                    prop_assert!(next.facts.contains(a));
                }
            }
            Err(_) => prop_assert!(!g.preconditions.iter().all(|p| s.holds(p))),
        }
    }

    #[test]
    fn oracle_plan_no_longer_than_any_walk(d in 0usize..3, steps in prop::collection::vec(any::<usize>(), 1..5), pick in any::<usize>()) {
        let fx = fixture(d);
        let end = walk(fx, &steps);
        let new: Vec<_> = end.facts.difference(&fx.builtin.initial.facts).cloned().collect();
        prop_assume!(!new.is_empty());
        let goal = Goal::single(new[pick % new.len()].clone());
        let plan = oracle_make_plan(&fx.builtin.initial, &goal, &fx.builtin.domain, OracleLimits::default()).unwrap();
        prop_assert!(plan.len() <= steps.len());
        let (reached, violation) = replay(&fx.builtin.initial, &plan, &fx.builtin.domain);
        prop_assert!(violation.is_none());
        prop_assert!(goal_satisfied(&reached, &goal).unwrap());
    }

    #[test]
    fn verdicts_imply(d in 0usize..3, sh in shape(), cut in any::<usize>(), fence in any::<bool>()) {
        let fx = fixture(d);
        let text = emit_tree(&BehaviorTree::new(build(fx, &sh)));
        // damaged or intact text, fenced or bare
        let mut end = cut % (text.len() + 1);
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        let body = if cut % 3 == 0 { text.as_str() } else { &text[..end] };
        let raw = if fence { format!("```json\n{body}\n```") } else { body.to_string() };
        let goal = fx.builtin.goals[cut % fx.builtin.goals.len()].clone();
        let m = evaluate_completion(&raw, &fx.builtin.initial, &goal, &fx.builtin.domain);
        prop_assert!(!m.sr || (m.lc && m.exec));
    }

    #[test]
    fn state_triples_round_trip(d in 0usize..3, start in prop::collection::vec(any::<usize>(), 0..6)) {
        let fx = fixture(d);
        let s = walk(fx, &start);
        let back = parse_state_triples(&render_state_triples(&s)).unwrap();
        prop_assert_eq!(back, s);
    }
}

fn rename_nth(node: &mut BtNode, target: usize, seen: &mut usize) {
    match node {
        BtNode::Action { action, .. } => {
            if *seen == target {
                *action = GroundAction::new(format!("{}_x", action.name), action.args.clone());
            }
            *seen += 1;
        }
        BtNode::Selector { children, .. } | BtNode::Sequence { children, .. } => {
            for c in children {
                rename_nth(c, target, seen);
            }
        }
        BtNode::Condition { .. } => {}
    }
}
