use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saedesign"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn a_sizes(allocation: &Value) -> Vec<f64> {
    allocation["reports"][0]["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["name"].as_str().unwrap().starts_with("A:"))
        .map(|e| e["n"].as_f64().unwrap())
        .collect()
}

#[test]
fn exp1_allocates_about_118_per_municipality() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["allocate", "--preset", "exp1"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let alloc = json(&dir.path().join("allocation.json"));
    let sizes = a_sizes(&alloc);
    assert_eq!(sizes.len(), 49);
    let avg = sizes.iter().sum::<f64>() / 49.0;
    assert!((avg - 118.0).abs() < 1.0, "{avg}");
    assert!(dir.path().join("trace.csv").exists());
}

#[test]
fn infeasible_preset_exits_2_with_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["allocate", "--preset", "infeasible"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(out.stderr.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert!(!err["violations"].as_array().unwrap().is_empty());
}

#[test]
fn iteration_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["allocate", "--preset", "exp1", "--solver", "fixed-point", "--max-iter", "2"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_input_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(
        &["allocate", "--frame", "x.csv", "--schema", missing.to_str().unwrap(), "--problem", "p.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

    let out = run(&["allocate", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fixed_point_is_no_worse_than_direct() {
    let dir = tempfile::tempdir().unwrap();
    let fp = dir.path().join("fp");
    let di = dir.path().join("di");
    assert_eq!(run(&["allocate", "--preset", "exp4", "--solver", "fixed-point"], &fp).status.code(), Some(0));
    assert_eq!(run(&["allocate", "--preset", "exp4", "--solver", "direct"], &di).status.code(), Some(0));
    let c_fp = json(&fp.join("allocation.json"))["cost"].as_f64().unwrap();
    let c_di = json(&di.join("allocation.json"))["cost"].as_f64().unwrap();
    assert!(c_fp <= c_di * (1.0 + 1e-9), "{c_fp} > {c_di}");
    assert!(c_fp >= 0.85 * c_di, "{c_fp} vs {c_di}");
}

#[test]
fn same_seed_same_sample() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["allocate", "--preset", "exp1"], dir.path()).status.code(), Some(0));
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let out = run(&["select", "--preset", "exp1", "--seed", "11"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        bytes.push(fs::read(dir.path().join("sample.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let other = run(&["select", "--preset", "exp1", "--seed", "12"], dir.path());
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(fs::read(dir.path().join("sample.csv")).unwrap(), bytes[0]);
    let manifest = json(&dir.path().join("manifest.json"));
    assert!(manifest.is_object());
}

#[test]
fn report_has_class_rows_and_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report", "--preset", "exp1"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    for label in ["Min-Q1", "Q1-Q2", "Q2-Q3", "Q3-Max", "All domains", "b1", "b2"] {
        assert!(report.contains(label), "{label} missing");
    }
    let conv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(conv.starts_with("start,iteration,cost"));
    assert!(conv.lines().count() > 2);
}

#[test]
fn simulate_writes_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--preset", "exp1", "--replicates", "20", "--seed", "5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sim = json(&dir.path().join("simulate.json"));
    assert_eq!(sim["replicates"], 20);
    let entries = sim["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 49);
    assert!(entries.iter().all(|e| e["ratio"].as_f64().is_some_and(|r| r > 0.0)));
}

#[test]
fn generated_frame_round_trips_through_allocate() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["generate", "--preset", "exp1"], dir.path()).status.code(), Some(0));
    let problem = dir.path().join("problem.json");
    let preset = json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/presets/exp1.json"));
    fs::write(&problem, preset["problem"].to_string()).unwrap();
    let frame = dir.path().join("frame.csv");
    let schema = dir.path().join("schema.json");
    let out = run(
        &[
            "allocate",
            "--frame",
            frame.to_str().unwrap(),
            "--schema",
            schema.to_str().unwrap(),
            "--problem",
            problem.to_str().unwrap(),
            "--solver",
            "direct",
        ],
        &dir.path().join("from_frame"),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let from_frame = json(&dir.path().join("from_frame/allocation.json"));
    assert_eq!(run(&["allocate", "--preset", "exp1", "--solver", "direct"], &dir.path().join("p")).status.code(), Some(0));
    let from_preset = json(&dir.path().join("p/allocation.json"));
    let (a, b) = (from_frame["cost"].as_f64().unwrap(), from_preset["cost"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-6 * b, "{a} vs {b}");
}
