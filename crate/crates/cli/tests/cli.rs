use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn btforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btforge")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_reference_tree() {
    let tree = fixture("reference_tree.json");
    let o = btforge(&["validate", tree.to_str().unwrap(), "--domain", "gearset"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS"));

    let o = btforge(&["--format", "json", "validate", tree.to_str().unwrap(), "--domain", "chair"]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], false);
    assert!(!v["violations"].as_array().unwrap().is_empty());
}

#[test]
fn simulate_reports_success_and_violation() {
    let good = fixture("reference_tree.json");
    let o = btforge(&["simulate", good.to_str().unwrap(), "--domain", "gearset", "--goal", "is_inserted_to(gear1, shaft1)"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("4. insert(left_hand, clampgripper, gear1, shaft1)"), "{text}");
    assert!(text.contains("goal is_inserted_to(gear1, shaft1): reached"));

    let bad = fixture("swapped_actions.json");
    let o = btforge(&["simulate", bad.to_str().unwrap(), "--domain", "gearset"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("violation: pick_up(left_hand, clampgripper, gear1) with unmet hold(left_hand, clampgripper)"), "{text}");
    assert!(text.contains("PRECONDITION_VIOLATION"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(btforge(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(btforge(&["validate", "x.json", "--domain", "desk"]).status.code(), Some(2));
    assert_eq!(btforge(&["eval", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(btforge(&["generate", "--scheme", "recursive"]).status.code(), Some(2));
    assert_eq!(btforge(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_with_oracle() {
    let o = btforge(&["--format", "json", "generate", "--scheme", "recursive", "--subgoal", "is_inserted_to(gear1, shaft1)"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("insert"));
}

#[test]
fn export_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("sessions.jsonl");
    let out = dir.path().join("data.jsonl");
    let o = btforge(&["eval", "--suite", "lamp-5", "--scheme", "recursive", "--sessions", sessions.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));

    let o = btforge(&[
        "export-dataset",
        "--task-type",
        "unit-tree",
        "--sessions",
        sessions.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for l in &lines {
        assert_eq!(l["task_type"], "unit_tree");
        assert!(l["prompt"].as_str().unwrap().len() > 20);
        btforge::bt::parse_tree(l["completion"].as_str().unwrap()).unwrap();
    }

    // recursive sessions carry no accepted one-step samples
    let o = btforge(&["export-dataset", "--task-type", "one-step", "--sessions", sessions.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
