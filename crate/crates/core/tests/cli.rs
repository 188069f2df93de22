use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const LB3: &str = r#"{
  "cake": {"lo": 0.0, "hi": 3.0},
  "agents": [
    {"name": "a1", "breakpoints": [0, 1, 2, 3], "values": [3, 2, 0]},
    {"name": "a2", "breakpoints": [0, 1, 2, 3], "values": [0, 1, 2]},
    {"name": "a3", "breakpoints": [0, 1, 2, 3], "values": [0, 1, 2]}
  ]
}"#;

const EF2: &str = r#"{
  "cake": {"lo": 0.0, "hi": 1.0},
  "agents": [
    {"name": "half", "breakpoints": [0, 0.5, 1], "values": [1, 0]},
    {"name": "flat", "breakpoints": [0, 1], "values": [1]}
  ]
}"#;

fn cakecut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cakecut")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn utilities(v: &Value) -> Vec<f64> {
    v["utilities"].as_array().unwrap().iter().map(|u| u.as_f64().unwrap()).collect()
}

#[test]
fn solve_lower_bound_instance() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "lb.json", LB3);
    let u = utilities(&json(&cakecut(&["solve", path.to_str().unwrap()])));
    for (a, b) in u.iter().zip([3.0, 1.5, 1.5]) {
        assert!((a - b).abs() < 1e-9, "{u:?}");
    }
}

#[test]
fn solve_single_agent() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"cake": {"lo": 0, "hi": 2}, "agents": [{"name": "solo", "breakpoints": [0, 1, 2], "values": [1, 3]}]}"#;
    let path = write(dir.path(), "one.json", text);
    let u = utilities(&json(&cakecut(&["solve", path.to_str().unwrap()])));
    assert_eq!(u, vec![4.0]);
}

#[test]
fn malformed_instance_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "bad.json", &LB3.replace("[3, 2, 0]", "[3, 2]"));
    let out = cakecut(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a1"));

    let path = write(dir.path(), "broken.json", "{\n  \"cake\": \n}");
    let out = cakecut(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = cakecut(&["run", path.to_str().unwrap(), "--mechanism", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_ef2_gives_three_eighths() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "ef2.json", EF2);
    let report = json(&cakecut(&["run", path.to_str().unwrap(), "--mechanism", "ef2"]));
    assert!((utilities(&report)[0] - 0.375).abs() < 1e-12);
    assert_eq!(report["audit"]["envy_free"], Value::Bool(true));
}

#[test]
fn interp_with_zero_exponent_is_mnw() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "lb.json", LB3);
    let p = path.to_str().unwrap();
    let a = json(&cakecut(&["run", p, "--mechanism", "interp", "--c", "0"]));
    let b = json(&cakecut(&["run", p, "--mechanism", "mnw"]));
    assert_eq!(utilities(&a), utilities(&b));
}

#[test]
fn seeded_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "lb.json", LB3);
    let p = path.to_str().unwrap();
    let mut a = json(&cakecut(&["run", p, "--mechanism", "rpa", "--seed", "7"]));
    let mut b = json(&cakecut(&["run", p, "--mechanism", "rpa", "--seed", "7"]));
    a["wall_clock_seconds"] = Value::Null;
    b["wall_clock_seconds"] = Value::Null;
    assert_eq!(a, b);
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "lb.json", LB3);
    let out = dir.path().join("report.json");
    let status = cakecut(&[
        "run",
        path.to_str().unwrap(),
        "--mechanism",
        "pa",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let report: cakecut::experiments::MechanismReport = serde_json::from_str(&text).unwrap();
    assert_eq!(cakecut::instance::to_json_pretty(&report), text);
}

#[test]
fn csv_utility_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "lb.json", LB3);
    let out = cakecut(&["run", path.to_str().unwrap(), "--mechanism", "even-split", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("agent,utility,mnw_utility,ratio"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn audit_an_allocation_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "ef2.json", EF2);
    let alloc = write(
        dir.path(),
        "alloc.json",
        r#"{"bundles": [[{"lo": 0, "hi": 0.2}], [{"lo": 0.2, "hi": 1}]], "complete": true}"#,
    );
    let report = json(&cakecut(&["audit", path.to_str().unwrap(), alloc.to_str().unwrap()]));
    assert_eq!(report["envy_free"], Value::Bool(false));
    assert_eq!(report["proportional"], Value::Bool(false));
}

#[test]
fn gen_then_attack() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("ef2.json");
    assert!(cakecut(&["gen", "ef2-lb", "--out", inst.to_str().unwrap()]).status.success());
    let report = json(&cakecut(&[
        "attack",
        inst.to_str().unwrap(),
        "--mechanism",
        "ef2",
        "--agent",
        "1",
        "--grid",
        "2",
        "--values",
        "0,1",
        "--max-cells",
        "2",
    ]));
    let ratio = report["attack"]["best_ratio"].as_f64().unwrap();
    assert!((ratio - 4.0 / 3.0).abs() < 1e-9, "{ratio}");

    let out = cakecut(&["attack", inst.to_str().unwrap(), "--mechanism", "ef2", "--agent", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_mnw_lower_bound_solves_to_known_utilities() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("lb.json");
    assert!(cakecut(&["gen", "mnw-lb", "--n", "3", "--out", inst.to_str().unwrap()]).status.success());
    let u = utilities(&json(&cakecut(&["solve", inst.to_str().unwrap()])));
    for (a, b) in u.iter().zip([3.0, 1.5, 1.5]) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn repro_exit_codes() {
    let out = cakecut(&["repro", "ef2-lb", "--instances", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], Value::Bool(true));

    let out = cakecut(&["repro", "mnw-lb", "--n", "10", "--eps", "1e-3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[PASS]"));

    // The prediction is exact for any epsilon, not only small ones.
    let out = cakecut(&["repro", "mnw-lb", "--n", "4", "--eps", "0.1"]);
    assert_eq!(out.status.code(), Some(0));

    assert_eq!(cakecut(&["repro", "nope"]).status.code(), Some(2));
}
