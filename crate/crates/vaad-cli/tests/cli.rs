//! End-to-end tests for the `vaad` binary: exit codes, printed verdicts, and
//! the artifact files each subcommand leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vaad");

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn out_dir(label: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(label);
    fs::create_dir_all(&dir).expect("create out dir");
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn vaad")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

#[test]
fn run_reference_scenario_passes_and_writes_artifacts() {
    let dir = out_dir("run_reference");
    let output = run(&[
        "run",
        "--scenario",
        scenario("reference.json").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--trace",
        "on",
    ]);
    let text = stdout(&output);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    assert!(text.contains("monitor liveness: pass"), "stdout: {text}");
    assert!(text.contains("monitor forged_vote_rejection: pass"));
    assert!(text.contains("trace digest: "));

    let metrics = fs::read_to_string(dir.join("metrics.csv")).expect("metrics.csv");
    assert!(metrics.starts_with("round,diameter_union,max_pairwise_output,nodes_terminated\n"));
    assert!(metrics.lines().count() > 1, "metrics has data rows");

    let trace = fs::read_to_string(dir.join("trace.jsonl")).expect("trace.jsonl");
    assert!(!trace.is_empty());
    for line in trace.lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("trace line is JSON");
    }
}

#[test]
fn seed_override_changes_the_digest_but_not_the_verdict() {
    let dir_a = out_dir("seed_a");
    let dir_b = out_dir("seed_b");
    let path = scenario("reference.json");
    let base = ["run", "--scenario", path.to_str().unwrap()];
    let out_a = run(&[&base[..], &["--seed", "1", "--out", dir_a.to_str().unwrap()]].concat());
    let out_b = run(&[&base[..], &["--seed", "2", "--out", dir_b.to_str().unwrap()]].concat());
    assert_eq!(exit_code(&out_a), 0);
    assert_eq!(exit_code(&out_b), 0);
    let digest = |text: &str| {
        text.lines()
            .find(|l| l.starts_with("trace digest: "))
            .map(str::to_owned)
            .expect("digest line")
    };
    assert_ne!(digest(&stdout(&out_a)), digest(&stdout(&out_b)));
    assert!(stdout(&out_a).contains("monitor liveness: pass"));
    assert!(stdout(&out_b).contains("monitor liveness: pass"));
}

#[test]
fn reruns_write_byte_identical_artifacts() {
    let dir_a = out_dir("rerun_a");
    let dir_b = out_dir("rerun_b");
    let path = scenario("reference.json");
    let mut outputs = Vec::new();
    for dir in [&dir_a, &dir_b] {
        let output = run(&[
            "run",
            "--scenario",
            path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--trace",
            "on",
        ]);
        assert_eq!(exit_code(&output), 0);
        // Drop the artifact-path lines: they name the (distinct) out dirs.
        let report: Vec<String> = stdout(&output)
            .lines()
            .filter(|l| !l.starts_with("metrics: ") && !l.starts_with("trace: "))
            .map(str::to_owned)
            .collect();
        outputs.push(report);
    }
    assert_eq!(outputs[0], outputs[1], "stdout is reproducible");
    let metrics_a = fs::read(dir_a.join("metrics.csv")).unwrap();
    let metrics_b = fs::read(dir_b.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    let trace_a = fs::read(dir_a.join("trace.jsonl")).unwrap();
    let trace_b = fs::read(dir_b.join("trace.jsonl")).unwrap();
    assert_eq!(trace_a, trace_b);
}

#[test]
fn resilience_violations_exit_with_a_config_error() {
    let dir = out_dir("bad_resilience");
    let path = dir.join("bad.json");
    fs::write(
        &path,
        r#"{
            "n": 6, "t": 2, "m": 1, "epsilon": 0.1,
            "inputs": [[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]]
        }"#,
    )
    .unwrap();
    let output = run(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(
        stderr(&output).contains("resilience bound violated"),
        "stderr: {}",
        stderr(&output)
    );
}

#[test]
fn unknown_scenario_fields_name_their_path() {
    let dir = out_dir("bad_field");
    let path = dir.join("bad.json");
    fs::write(
        &path,
        r#"{
            "n": 4, "t": 1, "m": 1, "epsilon": 0.1,
            "inputs": [[0.0], [1.0], [2.0], [3.0]],
            "bogus_knob": true
        }"#,
    )
    .unwrap();
    let output = run(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(
        stderr(&output).contains("bogus_knob"),
        "stderr: {}",
        stderr(&output)
    );
}

#[test]
fn malformed_coordinates_report_the_offending_entry() {
    let dir = out_dir("bad_coord");
    let path = dir.join("bad.json");
    fs::write(
        &path,
        r#"{
            "n": 4, "t": 1, "m": 1, "epsilon": 0.1,
            "inputs": [[0.0], [1.0], ["oops"], [3.0]]
        }"#,
    )
    .unwrap();
    let output = run(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(
        stderr(&output).contains("inputs[2]"),
        "stderr: {}",
        stderr(&output)
    );
}

#[test]
fn sweep_writes_a_row_per_seed() {
    let dir = out_dir("sweep_rows");
    let output = run(&[
        "sweep",
        "--scenario",
        scenario("reference.json").to_str().unwrap(),
        "--seeds",
        "0..4",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let text = stdout(&output);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    assert!(text.contains("runs: 5"), "stdout: {text}");
    assert!(text.contains("passes: 5"), "stdout: {text}");

    let csv = fs::read_to_string(dir.join("sweep.csv")).expect("sweep.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "seed,final_rounds_max,max_pairwise_output,all_monitors_pass"
    );
    assert_eq!(lines.len(), 6, "header plus one row per seed");
    for (idx, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{idx},")), "row {idx}: {line}");
        assert!(line.ends_with(",true"), "row {idx}: {line}");
    }
}

#[test]
fn inverted_seed_ranges_are_rejected() {
    let dir = out_dir("sweep_inverted");
    let output = run(&[
        "sweep",
        "--scenario",
        scenario("reference.json").to_str().unwrap(),
        "--seeds",
        "5..2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&output), 2);
    assert!(
        stderr(&output).contains("inverted"),
        "stderr: {}",
        stderr(&output)
    );
}

#[test]
fn demo_subcommand_separates_two_clusters_and_contrasts() {
    let dir = out_dir("demo_report");
    let output = run(&[
        "demo-lower-bound",
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let text = stdout(&output);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    assert!(text.contains("clusters: 2"), "stdout: {text}");
    assert!(text.contains("separation: "), "stdout: {text}");
    assert!(
        text.contains("contrast (n = 3t + 1): monitors pass"),
        "stdout: {text}"
    );

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("demo_report.json")).unwrap()).unwrap();
    let separation = report["separation"].as_f64().expect("separation field");
    let epsilon = report["epsilon"].as_f64().expect("epsilon field");
    assert!(separation > epsilon, "{separation} > {epsilon}");
    assert_eq!(report["clusters"].as_array().map(Vec::len), Some(2));
}

#[test]
fn demo_reruns_print_identically() {
    let first = run(&["demo-lower-bound", "--seed", "11"]);
    let second = run(&["demo-lower-bound", "--seed", "11"]);
    assert_eq!(exit_code(&first), 0);
    assert_eq!(stdout(&first), stdout(&second));
    let other = run(&["demo-lower-bound", "--seed", "12"]);
    assert_ne!(stdout(&first), stdout(&other), "seed changes the inputs");
}

#[test]
fn event_cap_env_aborts_with_failure_exit() {
    let dir = out_dir("event_cap");
    let output = Command::new(BIN)
        .args([
            "run",
            "--scenario",
            scenario("reference.json").to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
        .env("VAAD_MAX_EVENTS", "3")
        .output()
        .expect("spawn vaad");
    assert_eq!(exit_code(&output), 1);
    let combined = format!("{}{}", stdout(&output), stderr(&output));
    assert!(
        combined.contains("event budget exhausted"),
        "output: {combined}"
    );
    // Partial metrics still land on disk so the abort can be inspected.
    assert!(dir.join("metrics.csv").exists());
}

#[test]
fn bracha_override_runs_clean() {
    let dir = out_dir("bracha_override");
    let output = run(&[
        "run",
        "--scenario",
        scenario("reference.json").to_str().unwrap(),
        "--broadcast",
        "bracha",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let text = stdout(&output);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    assert!(text.contains("monitor broadcast_agreement: pass"), "{text}");
}
