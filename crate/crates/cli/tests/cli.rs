use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refocus"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn planted_eval(out_dir: &Path, iterations: usize) -> Command {
    let mut cmd = bin();
    cmd.args(["run-eval", "--frames", "synthetic", "--probe", "inline", "--min-frames", "64", "--max-frames", "64"])
        .arg("--iterations")
        .arg(iterations.to_string())
        .arg("--dataset")
        .arg(fixture("planted20.jsonl"))
        .arg("--mock-script")
        .arg(fixture("planted_script.json"))
        .arg("--out")
        .arg(out_dir);
    cmd
}

fn accuracy(report: &Path) -> f64 {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    v["metrics"]["video_qa/accuracy"]["value"].as_f64().unwrap()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_mock() -> (Server, String) {
    let mut child = bin()
        .args(["mock-serve", "--addr", "127.0.0.1:0", "--script"])
        .arg(fixture("planted_script.json"))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("banner").to_string();
    (Server(child), url)
}

#[test]
fn mock_server_drives_run_eval_over_http() {
    let (_server, url) = start_mock();
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["run-eval", "--frames", "synthetic", "--probe", "inline", "--min-frames", "64", "--max-frames", "64"])
        .arg("--dataset")
        .arg(fixture("planted20.jsonl"))
        .args(["--endpoint", &url, "--model", "planted"])
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(accuracy(&dir.path().join("report.json")), 1.0);
    assert!(dir.path().join("traces.jsonl").is_file());
    assert!(!dir.path().join("traces.partial.jsonl").exists());
}

#[test]
fn more_iterations_raise_planted_accuracy() {
    let one = tempfile::tempdir().unwrap();
    let three = tempfile::tempdir().unwrap();
    assert!(run(&mut planted_eval(one.path(), 1)).status.success());
    let out = run(&mut planted_eval(three.path(), 3));
    assert!(out.status.success(), "{}", stderr(&out));
    let (a1, a3) = (accuracy(&one.path().join("report.json")), accuracy(&three.path().join("report.json")));
    assert!(a3 > a1, "K=3 {a3} vs K=1 {a1}");
    assert_eq!(a3, 1.0);
}

#[test]
fn planted_report_matches_golden_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&mut planted_eval(dir.path(), 3));
    assert!(out.status.success(), "{}", stderr(&out));
    let got = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let golden = fixture("planted20_report_k3.json");
    if std::env::var_os("REFOCUS_BLESS").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(golden).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    assert!(run(&mut planted_eval(full.path(), 3)).status.success());
    let report = std::fs::read(full.path().join("report.json")).unwrap();
    let traces = std::fs::read_to_string(full.path().join("traces.jsonl")).unwrap();

    // an interrupted run leaves a partial log with a torn last line
    let partial = tempfile::tempdir().unwrap();
    let mut log: String = traces.lines().take(7).map(|l| format!("{l}\n")).collect();
    log.push_str(&traces.lines().nth(7).unwrap()[..40]);
    std::fs::write(partial.path().join("traces.partial.jsonl"), log).unwrap();

    let out = run(planted_eval(partial.path(), 3).arg("--resume"));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("ran 13, reused 7"), "{}", stderr(&out));
    assert_eq!(std::fs::read(partial.path().join("report.json")).unwrap(), report);
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(bin()
        .args(["run-eval", "--dataset", "/nonexistent/data.jsonl", "--frames", "synthetic"])
        .arg("--mock-script")
        .arg(fixture("planted_script.json"))
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not exist"));
    assert!(!out_dir.exists());
}

#[test]
fn run_eval_refuses_invalid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(bin()
        .args(["run-eval", "--frames", "synthetic", "--probe", "inline"])
        .arg("--dataset")
        .arg(fixture("one_bad.jsonl"))
        .arg("--mock-script")
        .arg(fixture("planted_script.json"))
        .arg("--out")
        .arg(&out_dir));
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn validate_reports_one_violation() {
    let out = run(bin().arg("validate").arg("--dataset").arg(fixture("one_bad.jsonl")));
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines, vec!["bad-1: ClueOutOfBounds [40.0, 50.0]"]);

    let ok = run(bin().arg("validate").arg("--dataset").arg(fixture("planted20.jsonl")));
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn stats_counts_match_hand_tally() {
    let out = run(bin().args(["stats", "--json"]).arg("--dataset").arg(fixture("one_bad.jsonl")));
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let totals = &v["totals"];
    assert_eq!(totals["records"], 4);
    assert_eq!(totals["temporal_clues"], 3);
    assert_eq!(totals["spatial_clues"], 1);
    assert_eq!(totals["thinks"], 4);
    assert_eq!(totals["qa_pairs"], 1);
    assert_eq!(v["by_task"]["temporal_clue"], 2);
    assert_eq!(v["by_source"]["Charades-STA"]["records"], 2);
}

fn write_completions(dir: &Path, lines: &[&str]) -> PathBuf {
    let path = dir.join("completions.jsonl");
    std::fs::write(&path, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    path
}

#[test]
fn rewards_compute_group_advantages() {
    let dir = tempfile::tempdir().unwrap();
    let right = r#"<think>t</think><clue>[1.0, 2.0]</clue><answer>B</answer>"#;
    let wrong = r#"<think>t</think><clue>[1.0, 2.0]</clue><answer>A</answer>"#;
    let lines: Vec<String> = [right, wrong, right, wrong]
        .iter()
        .map(|c| serde_json::json!({"id": "planted-000", "group": "g1", "completion": c}).to_string())
        .collect();
    let completions = write_completions(dir.path(), &lines.iter().map(String::as_str).collect::<Vec<_>>());
    let out_path = dir.path().join("rewards.jsonl");
    let out = run(bin()
        .args(["rewards", "--lambda-fmt", "0", "--lambda-clue", "0"])
        .arg("--completions")
        .arg(&completions)
        .arg("--dataset")
        .arg(fixture("planted20.jsonl"))
        .arg("--out")
        .arg(&out_path));
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let totals: Vec<f64> = rows.iter().map(|r| r["total"].as_f64().unwrap()).collect();
    assert_eq!(totals, vec![1.0, 0.0, 1.0, 0.0]);
    for (row, want) in rows.iter().zip([1.0, -1.0, 1.0, -1.0]) {
        assert!((row["advantage"].as_f64().unwrap() - want).abs() < 1e-5);
    }
}

#[test]
fn empty_completions_give_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let completions = write_completions(dir.path(), &[]);
    let out_path = dir.path().join("rewards.jsonl");
    let out = run(bin()
        .arg("rewards")
        .arg("--completions")
        .arg(&completions)
        .arg("--dataset")
        .arg(fixture("planted20.jsonl"))
        .arg("--out")
        .arg(&out_path));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&out_path).unwrap(), "");
}

#[test]
fn orphan_completion_is_a_join_failure() {
    let dir = tempfile::tempdir().unwrap();
    let completions = write_completions(dir.path(), &[r#"{"id": "ghost-7", "completion": "<think>t</think>"}"#]);
    let out = run(bin()
        .arg("rewards")
        .arg("--completions")
        .arg(&completions)
        .arg("--dataset")
        .arg(fixture("planted20.jsonl")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("JoinFailure") && stderr(&out).contains("ghost-7"));
}

#[test]
fn report_rebuilds_from_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&mut planted_eval(dir.path(), 3)).status.success());
    let rebuilt = dir.path().join("again/report.json");
    let out = run(bin()
        .arg("report")
        .arg("--dataset")
        .arg(fixture("planted20.jsonl"))
        .arg("--traces")
        .arg(dir.path().join("traces.jsonl"))
        .args(["--model", "mock:planted_script.json"])
        .arg("--out")
        .arg(&rebuilt));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(rebuilt).unwrap(), std::fs::read(dir.path().join("report.json")).unwrap());
}

#[test]
fn episode_prints_a_complete_trace() {
    let out = run(bin()
        .args(["episode", "--frames", "synthetic", "--probe", "inline", "--id", "planted-004"])
        .arg("--dataset")
        .arg(fixture("planted20.jsonl"))
        .arg("--mock-script")
        .arg(fixture("planted_script.json")));
    assert!(out.status.success(), "{}", stderr(&out));
    let trace: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(trace["id"], "planted-004");
    assert_eq!(trace["iterations"].as_array().unwrap().len(), 3);
    assert_eq!(trace["final_answer"], "B");
}

#[test]
fn unknown_preset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(planted_eval(dir.path(), 3).args(["--preset", "bogus"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
}
