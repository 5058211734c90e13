use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use tampc::harness::{read_results_csv, TrialResult};
use tampc::sim::Dataset;

fn tampc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tampc"))
        .current_dir(dir)
        .env_remove("TAMPC_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", stderr(&o));
    stdout(&o)
}

#[test]
fn collect_writes_default_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(tampc(dir.path(), &["collect", "--out", "data.jsonl"]));
    assert!(out.contains("wrote 10000 transitions"));
    let data = Dataset::read_jsonl(BufReader::new(File::open(dir.path().join("data.jsonl")).unwrap())).unwrap();
    assert_eq!(data.trajectories.len(), 200);
    assert_eq!(data.len(), 10_000);
    assert!(data.transitions().all(|t| t.state.reaction.norm() == 0.0 && t.next_state.reaction.norm() == 0.0));
}

#[test]
fn errors_are_distinct_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 5] = [
        (&["run", "--task", "peg-x", "--nominal", "exact"], "unknown task key `peg-x`"),
        (&["run", "--controller", "sac", "--nominal", "exact"], "unknown controller key `sac`"),
        (&["run", "--nominal", "oracle"], "unknown nominal model `oracle`"),
        (&["run", "--checkpoints", "nowhere"], "missing file"),
        (&["plot", "--results", "absent.csv"], "missing file: absent.csv"),
    ];
    let mut seen = Vec::new();
    for (args, needle) in cases {
        let o = tampc(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert!(err.contains(needle), "{args:?}: {err}");
        seen.push(err);
    }
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 5);

    let o = tampc(dir.path(), &["run", "--task", "peg-t"]);
    assert!(stderr(&o).contains("checkpoints"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "max_steps = \"many\"").unwrap();
    let o = tampc(dir.path(), &["run", "--config", "bad.toml", "--nominal", "exact"]);
    assert!(stderr(&o).contains("malformed document"), "{}", stderr(&o));
}

#[test]
fn run_prints_trial_result_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(tampc(
        dir.path(),
        &["run", "--task", "peg-i", "--nominal", "exact", "--max-steps", "15", "--seed", "3", "--log", "run.jsonl"],
    ));
    let r: TrialResult = serde_json::from_str(out.trim()).unwrap();
    assert_eq!((r.task.as_str(), r.controller.as_str(), r.seed, r.steps), ("peg-i", "tampc", 3, 15));
    assert!(!r.success);
    let log = std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
}

#[test]
fn nonadaptive_stays_trapped_on_peg_t() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(tampc(dir.path(), &["run", "--task", "peg-t", "--controller", "nonadaptive", "--nominal", "exact"]));
    let r: TrialResult = serde_json::from_str(out.trim()).unwrap();
    assert!(!r.success);
    assert_eq!(r.steps, 500);
}

#[test]
fn eval_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(tampc(
        dir.path(),
        &[
            "eval", "--task", "freespace", "--controller", "nonadaptive,tampc", "--nominal", "exact", "--seeds", "0..2",
            "--max-steps", "80", "--out", "res/results.csv", "--logs", "logs",
        ],
    ));
    assert!(out.contains("freespace nonadaptive: 3/3 successes"), "{out}");
    let rows = read_results_csv(File::open(dir.path().join("res/results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|r| r.is_summary()).count(), 2);
    assert_eq!(std::fs::read_dir(dir.path().join("logs")).unwrap().count(), 6);

    ok(tampc(dir.path(), &["plot", "--results", "res/results.csv", "--out", "chart.svg"]));
    let svg = std::fs::read_to_string(dir.path().join("chart.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("nonadaptive"));
}

#[test]
fn output_directory_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("outputs");
    let o = Command::new(env!("CARGO_BIN_EXE_tampc"))
        .current_dir(dir.path())
        .env("TAMPC_OUT_DIR", &root)
        .args(["collect", "--n-traj", "2", "--n-steps", "5", "--out", "tiny.jsonl"])
        .output()
        .unwrap();
    ok(o);
    assert!(root.join("tiny.jsonl").exists());
    assert!(!dir.path().join("tiny.jsonl").exists());
}

#[test]
fn train_then_run_with_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    ok(tampc(dir.path(), &["collect", "--n-traj", "20", "--n-steps", "10", "--out", "d.jsonl"]));
    let out = ok(tampc(dir.path(), &["train", "--dataset", "d.jsonl", "--out", "ck", "--epochs", "2"]));
    assert!(out.contains("saved checkpoints"));
    for f in ["invariant.json", "baseline.json", "calibration.json", "curve.csv"] {
        assert!(dir.path().join("ck").join(f).exists(), "{f}");
    }
    for nominal in ["invariant", "baseline"] {
        let out = ok(tampc(
            dir.path(),
            &["run", "--task", "peg-t", "--checkpoints", "ck", "--nominal", nominal, "--max-steps", "5"],
        ));
        let r: TrialResult = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(r.steps, 5);
    }
}
