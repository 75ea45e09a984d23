//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use btforge::backends::{Backend, BackendError, Completion, OracleBackend, Query, Request, ScriptedBackend};
use btforge::bt::{build_unit_subtree, parse_tree, well_formed, BehaviorTree, BtNode};
use btforge::data::REFERENCE_TREE;
use btforge::domain::{builtin_domain, goal_satisfied, DomainSpec, Goal, GroundAction, Grounding, WorldState};
use btforge::harness::{builtin_suite, export_dataset, run_suite, AutoAccept, TaskType, BUILTIN_SUITES};
use btforge::schemes::{Generator, Scheme, SessionStatus};
use btforge::sim::{replay, simulate, DEFAULT_TICK_BUDGET};
use btforge::validation::{check_exec, evaluate_completion, MetricsRecord};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

fn main() {
    let criteria: [(&str, fn() -> Result<String, String>); 8] = [
        ("golden gear1 scenario", golden_scenario),
        ("oracle recursive soundness", oracle_soundness),
        ("simulator/replay equivalence", replay_equivalence),
        ("verdict implication", verdict_implication),
        ("mutation sensitivity", mutation_sensitivity),
        ("report shape and determinism", report_golden),
        ("dataset export", dataset_export),
        ("iterative feedback loop", feedback_loop),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("[PASS] criterion {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gearset() -> (DomainSpec, WorldState) {
    let b = builtin_domain("gearset").unwrap();
    (b.domain, b.initial)
}

fn act(text: &str) -> GroundAction {
    let (name, rest) = text.split_once('(').unwrap();
    GroundAction::new(name, rest.trim_end_matches(')').split(',').map(|a| a.trim().to_string()))
}

fn golden_scenario() -> Result<String, String> {
    let (domain, initial) = gearset();
    let started = Instant::now();
    let tree = parse_tree(REFERENCE_TREE).map_err(|e| e.to_string())?;
    let trace = simulate(&tree, &initial, &domain, DEFAULT_TICK_BUDGET);
    let elapsed = started.elapsed();
    let expected: Vec<GroundAction> = [
        "put_down(left_hand,parallelgripper,shaft3)",
        "change_tool(left_hand,parallelgripper,clampgripper)",
        "pick_up(left_hand,clampgripper,gear1)",
        "insert(left_hand,clampgripper,gear1,shaft1)",
    ]
    .iter()
    .map(|a| act(a))
    .collect();
    ensure!(trace.succeeded(), "status {:?}", trace.status);
    ensure!(trace.fired == expected, "fired {:?}", trace.fired);
    let goal = Goal::parse("is_inserted_to(gear1, shaft1)").unwrap();
    ensure!(goal_satisfied(&trace.final_state, &goal).unwrap(), "goal not reached");
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("4 actions fired in order, {elapsed:?}"))
}

/// Oracle wrapper that keeps every MakePlan exchange with its inputs.
struct PlanTap {
    inner: OracleBackend,
    seen: Mutex<Vec<(WorldState, Goal, String)>>,
}

impl Backend for PlanTap {
    fn name(&self) -> &str {
        "oracle"
    }
    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        let c = self.inner.complete(request)?;
        if let Query::MakePlan { goal, state, .. } = request.query {
            self.seen.lock().unwrap().push((state.clone(), goal.clone(), c.text.clone()));
        }
        Ok(c)
    }
}

fn successor(state: &WorldState, g: &Grounding) -> WorldState {
    let mut next = state.clone();
    for d in &g.delete_effects {
        next.facts.remove(d);
    }
    next.facts.extend(g.add_effects.iter().cloned());
    next
}

/// Exhaustive depth-first search over all sequences up to `depth` long.
fn reachable_within(state: &WorldState, goal: &Goal, ground: &[Grounding], depth: usize) -> bool {
    if goal_satisfied(state, goal).unwrap() {
        return true;
    }
    depth > 0
        && ground.iter().any(|g| {
            g.preconditions.iter().all(|p| state.holds(p))
                && reachable_within(&successor(state, g), goal, ground, depth - 1)
        })
}

fn oracle_soundness() -> Result<String, String> {
    let started = Instant::now();
    let mut plans = 0;
    let mut summary = Vec::new();
    for id in BUILTIN_SUITES {
        let suite = builtin_suite(id).map_err(|e| e.to_string())?;
        let tap = PlanTap {
            inner: OracleBackend::default(),
            seen: Mutex::new(Vec::new()),
        };
        let report = run_suite(&suite, Scheme::Recursive, &Generator::new(&tap), None);
        let agg = report.aggregate(true);
        ensure!(agg.sr == agg.n, "{id}: SR {}/{}", agg.sr, agg.n);
        summary.push(format!("{id} SR {}/{}", agg.sr, agg.n));
        let domain = &suite.domain.domain;
        let ground = domain.all_ground_actions();
        for (state, goal, text) in tap.seen.lock().unwrap().iter() {
            let doc: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
            let plan: Vec<GroundAction> = serde_json::from_value(doc["plan"].clone()).map_err(|e| e.to_string())?;
            let (end, violation) = replay(state, &plan, domain);
            ensure!(violation.is_none(), "{id}: plan for {goal} violates {violation:?}");
            ensure!(goal_satisfied(&end, goal).unwrap(), "{id}: plan for {goal} misses it");
            if !plan.is_empty() {
                ensure!(
                    !reachable_within(state, goal, &ground, plan.len() - 1),
                    "{id}: {goal} has a plan shorter than {}",
                    plan.len()
                );
            }
            plans += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{}; {plans} MakePlan answers minimal; {elapsed:.2?}", summary.join(", ")))
}

/// Random composition of unit subtrees. About one unit in four loses one of
/// its precondition checks so that violating runs occur.
fn random_tree(rng: &mut StdRng, domain: &DomainSpec, ground: &[Grounding], depth: usize) -> BtNode {
    if depth == 0 || rng.random_bool(0.4) {
        let g = &ground[rng.random_range(0..ground.len())];
        let mut root = build_unit_subtree(&g.action, domain).unwrap().root;
        if rng.random_bool(0.25) {
            if let BtNode::Selector { children, .. } = &mut root {
                if let BtNode::Sequence { children: steps, .. } = &mut children[1] {
                    if steps.len() > 1 {
                        let k = rng.random_range(0..steps.len() - 1);
                        steps.remove(k);
                    }
                }
            }
        }
        return root;
    }
    let n = rng.random_range(1..4);
    let children = (0..n).map(|_| random_tree(rng, domain, ground, depth - 1)).collect();
    if rng.random_bool(0.5) {
        BtNode::sequence("seq", children)
    } else {
        BtNode::selector("sel", children)
    }
}

fn random_state(rng: &mut StdRng, initial: &WorldState, ground: &[Grounding]) -> WorldState {
    let mut s = initial.clone();
    for _ in 0..rng.random_range(0..4) {
        let options: Vec<&Grounding> = ground.iter().filter(|g| g.preconditions.iter().all(|p| s.holds(p))).collect();
        if options.is_empty() {
            break;
        }
        s = successor(&s, options[rng.random_range(0..options.len())]);
    }
    s
}

fn replay_equivalence() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let fixtures: Vec<_> = ["gearset", "chair", "lamp"]
        .iter()
        .map(|d| {
            let b = builtin_domain(d).unwrap();
            let ground = b.domain.all_ground_actions();
            (b, ground)
        })
        .collect();
    let total = 600;
    let (mut agree, mut violating) = (0, 0);
    for i in 0..total {
        let (b, ground) = &fixtures[i % fixtures.len()];
        let tree = BehaviorTree::new(random_tree(&mut rng, &b.domain, ground, 3));
        ensure!(well_formed(&tree, &b.domain).pass(), "generated tree {i} is not well formed");
        let init = random_state(&mut rng, &b.initial, ground);
        let trace = simulate(&tree, &init, &b.domain, DEFAULT_TICK_BUDGET);
        let (end, violation) = replay(&init, &trace.fired, &b.domain);
        let first = trace.violations.first().map(|v| (v.action.clone(), v.unmet.clone()));
        if end == trace.final_state && first == violation.map(|v| (v.action, v.unmet)) {
            agree += 1;
        }
        violating += usize::from(!trace.violations.is_empty());
    }
    ensure!(agree == total, "{agree}/{total} agree");
    ensure!(violating > 0, "no run produced a violation");
    Ok(format!("{agree}/{total} trees agree, {violating} with violations"))
}

fn verdict_implication() -> Result<String, String> {
    let mut records: Vec<MetricsRecord> = Vec::new();
    let oracle = OracleBackend::default();
    for id in BUILTIN_SUITES {
        let suite = builtin_suite(id).map_err(|e| e.to_string())?;
        for scheme in Scheme::ALL {
            let mut auto = AutoAccept::default();
            let report = run_suite(&suite, scheme, &Generator::new(&oracle), Some(&mut auto));
            records.extend(report.rows.into_iter().map(|r| r.metrics));
        }
    }
    let suite = builtin_suite("gearset-10").map_err(|e| e.to_string())?;
    for scheme in Scheme::ALL {
        let backend = ScriptedBackend::from_file(&transcripts().join(format!("{scheme}.jsonl"))).map_err(|e| e.to_string())?;
        let mut auto = AutoAccept::default();
        let report = run_suite(&suite, scheme, &Generator::new(&backend), Some(&mut auto));
        records.extend(report.rows.into_iter().map(|r| r.metrics));
    }
    let (domain, initial) = gearset();
    let goal = Goal::parse("is_inserted_to(gear1, shaft1)").unwrap();
    for (_, raw) in mutants() {
        records.push(evaluate_completion(&raw, &initial, &goal, &domain));
    }
    let bad = records.iter().filter(|m| m.sr && !(m.lc && m.exec)).count();
    ensure!(bad == 0, "{bad} of {} samples break sr => lc and exec", records.len());
    let failing = records.iter().filter(|m| !m.sr).count();
    Ok(format!("{} samples, {failing} unsuccessful, 0 exceptions", records.len()))
}

fn action_nodes(v: &mut Value, out: &mut Vec<*mut Value>) {
    if v["kind"] == "action" {
        out.push(v as *mut Value);
    }
    if let Some(children) = v.get_mut("children").and_then(Value::as_array_mut) {
        for c in children {
            action_nodes(c, out);
        }
    }
}

fn with_actions(doc: &mut Value, f: impl FnOnce(&mut [&mut Value])) {
    let mut ptrs = Vec::new();
    action_nodes(doc, &mut ptrs);
    // SAFETY: the pointers address distinct nodes of `doc`, which outlives this call.
    let mut refs: Vec<&mut Value> = ptrs.into_iter().map(|p| unsafe { &mut *p }).collect();
    f(&mut refs);
}

/// The four mutants of the reference tree, as model output text.
fn mutants() -> Vec<(&'static str, String)> {
    let base: Value = serde_json::from_str(REFERENCE_TREE).unwrap();
    let fenced = |v: &Value| format!("```json\n{}\n```", serde_json::to_string_pretty(v).unwrap());

    let mut renamed = base.clone();
    with_actions(&mut renamed, |acts| {
        acts[0]["action"]["name"] = "set_down".into();
        acts[0]["name"] = "set_down(left_hand, parallelgripper, shaft3)".into();
    });

    // the insert sequence loses its hold(left_hand, clampgripper) check
    let mut dropped = base.clone();
    let steps = dropped["children"][1]["children"].as_array_mut().unwrap();
    assert_eq!(steps[0]["name"], "hold(left_hand, clampgripper)");
    steps.remove(0);

    let mut swapped = base.clone();
    with_actions(&mut swapped, |acts| {
        let first = acts[0].clone();
        *acts[0] = acts[2].clone();
        *acts[2] = first;
    });

    vec![
        ("rename action", fenced(&renamed)),
        ("drop precondition check", fenced(&dropped)),
        ("swap actions 1 and 3", fenced(&swapped)),
        ("strip structured block", "First put down the shaft, then change to the clampgripper, pick up gear1 and insert it into shaft1.".to_string()),
    ]
}

fn mutation_sensitivity() -> Result<String, String> {
    let (domain, initial) = gearset();
    let goal = Goal::parse("is_inserted_to(gear1, shaft1)").unwrap();
    let original = evaluate_completion(&format!("```json\n{REFERENCE_TREE}```"), &initial, &goal, &domain);
    ensure!(original.sr && original.lc && original.exec, "reference tree does not pass");
    // (exec, lc, sr) expected for each mutant
    let table = [(false, false, false), (true, true, false), (true, false, false), (false, false, false)];
    let mut detected = 0;
    for ((name, raw), expected) in mutants().into_iter().zip(table) {
        let m = evaluate_completion(&raw, &initial, &goal, &domain);
        let got = (m.exec, m.lc, m.sr);
        ensure!(got == expected, "{name}: (exec, lc, sr) = {got:?}, expected {expected:?}");
        detected += usize::from(!m.sr);
    }
    ensure!(detected == 4, "{detected}/4 detected");
    Ok("4/4 mutants detected with the expected verdicts".into())
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn transcripts() -> PathBuf {
    crate_dir().join("tests/fixtures/transcripts")
}

fn eval_stable(dir: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_btforge"))
        .args(["eval", "--suite", "gearset-10", "--scheme", "all", "--stable", "--backend"])
        .arg(format!("scripted:{}", dir.display()))
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "eval exited {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    Ok(out.stdout)
}

fn report_golden() -> Result<String, String> {
    let first = eval_stable(&transcripts())?;
    let second = eval_stable(&transcripts())?;
    ensure!(first == second, "two runs differ");
    let golden = std::fs::read(crate_dir().join("tests/golden/gearset-10.report.md")).map_err(|e| e.to_string())?;
    ensure!(first == golden, "report differs from the golden file:\n{}", String::from_utf8_lossy(&first));
    let text = String::from_utf8_lossy(&first);
    ensure!(text.contains("| Method | SR | LC | Exec | GD(sec.) | TC |"), "header row missing");
    ensure!(text.contains("| One-step | 9/10 | 9/10 | 9/10 |"), "malformed reply not counted");
    Ok(format!("{} bytes, byte-identical across runs and to the golden file", first.len()))
}

fn dataset_export() -> Result<String, String> {
    let suite = builtin_suite("gearset-10").map_err(|e| e.to_string())?;
    let oracle = OracleBackend::default();
    let report = run_suite(&suite, Scheme::Recursive, &Generator::new(&oracle), None);
    let leaves: usize = report
        .sessions
        .iter()
        .filter_map(|s| s.final_tree.as_ref())
        .map(|t| t.action_leaf_count())
        .sum();
    let samples = export_dataset(&report.sessions, TaskType::UnitTree).map_err(|e| e.to_string())?;
    ensure!(samples.len() == leaves, "{} samples for {leaves} action leaves", samples.len());
    let domain = &suite.domain.domain;
    for s in &samples {
        let tree = parse_tree(&s.completion).map_err(|e| format!("{}: {e}", s.session))?;
        ensure!(well_formed(&tree, domain).pass(), "{} does not pass well_formed", s.session);
    }
    Ok(format!("{} samples = {leaves} action leaves, all re-parse and pass", samples.len()))
}

fn feedback_loop() -> Result<String, String> {
    let (domain, initial) = gearset();
    let goal = Goal::parse("is_inserted_to(gear1, shaft1)").unwrap();
    let round1 = "```json\n{\"kind\": \"selector\", \"name\": \"root\", \"children\": [\n```";
    let round2 = format!("```json\n{REFERENCE_TREE}```");
    let backend = ScriptedBackend::from_replies([round1.to_string(), round2]);
    let (session, result) = Generator::new(&backend).iterative(&goal, &initial, &domain);
    ensure!(result.is_ok(), "not accepted: {:?}", result.err());
    ensure!(session.status == SessionStatus::Accepted, "status {:?}", session.status);
    ensure!(session.calls.len() == 2, "{} rounds", session.calls.len());
    let reasons = check_exec(round1, &domain).failure_reasons();
    ensure!(!reasons.is_empty(), "round 1 reply was not rejected");
    for r in reasons {
        let sentence = r.feedback_sentence();
        ensure!(!session.calls[0].prompt.contains(sentence), "sentence already in round 1");
        ensure!(session.calls[1].prompt.contains(sentence), "round 2 prompt lacks {sentence:?}");
    }
    Ok("accepted at round 2 with the round-1 failure sentence in the prompt".into())
}
