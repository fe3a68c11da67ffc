//! End-to-end tests for the `gn` binary: exit codes, file formats, and the
//! determinism guarantees scripts depend on.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gnet::compose::init_epd_params;
use gnet::nn::ParameterStore;
use gnet::tasks::physics::{gen_physics, gen_physics_sample, physics_step, PhysicsState};
use gnet::tasks::{default_architecture, write_samples, TaskKind};
use gnet::train::init_rng;
use tempfile::TempDir;

fn gn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gn"))
        .args(args)
        .output()
        .expect("spawn gn")
}

fn run_ok(args: &[&str]) -> Output {
    let out = gn(args);
    assert!(
        out.status.success(),
        "gn {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn generate_is_deterministic_and_writes_one_line_per_sample() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        run_ok(&[
            "generate", "--task", "sort", "--count", "5", "--size", "4", "--seed", "9", "--out",
            path_str(out),
        ]);
    }
    let bytes_a = fs::read(&a).unwrap();
    assert_eq!(bytes_a, fs::read(&b).unwrap());
    assert_eq!(bytes_a.iter().filter(|&&c| c == b'\n').count(), 5);
}

#[test]
fn generate_zero_count_writes_an_empty_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("empty.jsonl");
    run_ok(&[
        "generate", "--task", "physics", "--count", "0", "--out", path_str(&out),
    ]);
    assert_eq!(fs::read(&out).unwrap(), b"");
}

#[test]
fn unknown_task_exits_2_and_lists_the_valid_names() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.jsonl");
    let res = gn(&["generate", "--task", "sorting", "--count", "1", "--out", path_str(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let err = stderr_of(&res);
    assert!(err.contains("shortest_path, sort, physics"), "stderr: {err}");
}

#[test]
fn zero_step_training_writes_the_untouched_initialization() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "sort", "--count", "3", "--size", "3", "--out", path_str(&data),
    ]);
    let run = dir.path().join("run");
    run_ok(&[
        "train", "--task", "sort", "--data", path_str(&data), "--steps", "0", "--seed", "4",
        "--out-dir", path_str(&run),
    ]);

    let mut expected = ParameterStore::new();
    let task = TaskKind::Sort;
    init_epd_params(
        &mut expected,
        &mut init_rng(4),
        &default_architecture(task),
        task.input_dims(),
    )
    .unwrap();
    assert_eq!(
        fs::read_to_string(run.join("checkpoint.json")).unwrap(),
        expected.to_json()
    );
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv")).unwrap(),
        "step,loss,node_acc,edge_acc\n"
    );
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_files_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "shortest_path", "--count", "6", "--size", "5", "--out",
        path_str(&data),
    ]);
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    run_ok(&[
        "train", "--task", "shortest_path", "--data", path_str(&data), "--steps", "6", "--batch",
        "2", "--out-dir", path_str(&straight),
    ]);
    run_ok(&[
        "train", "--task", "shortest_path", "--data", path_str(&data), "--steps", "3", "--batch",
        "2", "--out-dir", path_str(&split),
    ]);
    run_ok(&[
        "train", "--task", "shortest_path", "--data", path_str(&data), "--steps", "6", "--batch",
        "2", "--out-dir", path_str(&split), "--resume",
    ]);
    for file in ["checkpoint.json", "state.json", "metrics.csv", "arch.json"] {
        assert_eq!(
            fs::read(straight.join(file)).unwrap(),
            fs::read(split.join(file)).unwrap(),
            "{file} differs between straight and resumed runs"
        );
    }
}

#[test]
fn metrics_rows_follow_the_logging_interval() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "sort", "--count", "4", "--size", "3", "--out", path_str(&data),
    ]);
    let run = dir.path().join("run");
    run_ok(&[
        "train", "--task", "sort", "--data", path_str(&data), "--steps", "5", "--batch", "2",
        "--log-every", "2", "--out-dir", path_str(&run),
    ]);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,node_acc,edge_acc");
    let steps: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["2", "4", "5"]);
}

#[test]
fn oracle_evaluation_is_perfect_on_generated_sort_data() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "sort", "--count", "6", "--size", "5", "--out", path_str(&data),
    ]);
    let out = run_ok(&["eval", "--task", "sort", "--data", path_str(&data), "--oracle"]);
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        r#"{"node_acc":1.0,"edge_acc":1.0,"graph_solved":1.0}"#
    );
}

#[test]
fn oracle_physics_evaluation_reports_zero_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "physics", "--count", "4", "--size", "3", "--out", path_str(&data),
    ]);
    let out = run_ok(&["eval", "--task", "physics", "--data", path_str(&data), "--oracle"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), r#"{"rmse":0.0}"#);
}

#[test]
fn evaluating_an_empty_dataset_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "").unwrap();
    for task in ["sort", "physics"] {
        let res = gn(&["eval", "--task", task, "--data", path_str(&data), "--oracle"]);
        assert_eq!(res.status.code(), Some(2), "task {task}");
        assert!(stderr_of(&res).contains("no samples"), "task {task}");
    }
}

#[test]
fn evaluation_needs_either_a_checkpoint_or_the_oracle() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "sort", "--count", "2", "--size", "3", "--out", path_str(&data),
    ]);
    let res = gn(&["eval", "--task", "sort", "--data", path_str(&data)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr_of(&res).contains("--checkpoint"));
}

#[test]
fn trained_checkpoints_evaluate_without_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "sort", "--count", "4", "--size", "3", "--out", path_str(&data),
    ]);
    let run = dir.path().join("run");
    run_ok(&[
        "train", "--task", "sort", "--data", path_str(&data), "--steps", "2", "--batch", "2",
        "--out-dir", path_str(&run),
    ]);
    let ckpt = run.join("checkpoint.json");
    let out = run_ok(&[
        "eval", "--task", "sort", "--data", path_str(&data), "--checkpoint", path_str(&ckpt),
    ]);
    let text = String::from_utf8_lossy(&out.stdout);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    for key in ["node_acc", "edge_acc", "graph_solved"] {
        assert!(v[key].is_number(), "missing {key} in {text}");
    }
}

#[test]
fn zero_step_rollout_writes_only_the_initial_state() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.jsonl");
    run_ok(&["rollout", "--steps", "0", "--oracle", "--out", path_str(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn oracle_rollout_matches_the_simulator_and_repeats_exactly() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        run_ok(&[
            "rollout", "--steps", "5", "--oracle", "--seed", "7", "--masses", "4", "--out",
            path_str(out),
        ]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    let mut expected = gen_physics(4, &mut init_rng(7));
    for (i, line) in text.lines().enumerate() {
        let got: PhysicsState = serde_json::from_str(line).unwrap();
        assert_eq!(
            serde_json::to_string(&got).unwrap(),
            serde_json::to_string(&expected).unwrap(),
            "state {i} diverges from the simulator"
        );
        expected = physics_step(&expected);
    }
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn model_rollout_runs_from_a_trained_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    run_ok(&[
        "generate", "--task", "physics", "--count", "3", "--size", "3", "--out", path_str(&data),
    ]);
    let run = dir.path().join("run");
    run_ok(&[
        "train", "--task", "physics", "--data", path_str(&data), "--steps", "2", "--batch", "2",
        "--out-dir", path_str(&run),
    ]);
    let ckpt = run.join("checkpoint.json");
    let out = dir.path().join("t.jsonl");
    run_ok(&[
        "rollout", "--steps", "3", "--checkpoint", path_str(&ckpt), "--masses", "3", "--out",
        path_str(&out),
    ]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);
}

#[test]
fn rollout_rejects_oracle_combined_with_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.jsonl");
    let res = gn(&[
        "rollout", "--steps", "1", "--oracle", "--checkpoint", "nope.json", "--out",
        path_str(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn rollout_accepts_an_explicit_initial_state_file() {
    let dir = TempDir::new().unwrap();
    let state = gen_physics(3, &mut init_rng(11));
    let state_path = dir.path().join("s0.json");
    fs::write(&state_path, serde_json::to_string(&state).unwrap()).unwrap();
    let out = dir.path().join("t.jsonl");
    run_ok(&[
        "rollout", "--steps", "2", "--oracle", "--state", path_str(&state_path), "--out",
        path_str(&out),
    ]);
    let first = fs::read_to_string(&out).unwrap();
    let first_state: PhysicsState = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(
        serde_json::to_string(&first_state).unwrap(),
        serde_json::to_string(&state).unwrap()
    );
}

#[test]
fn diverging_training_exits_3_and_keeps_the_last_finite_checkpoint() {
    let dir = TempDir::new().unwrap();
    // Targets near the float maximum make the very first squared error
    // overflow to infinity, so the run must stop before updating anything.
    let mut sample = gen_physics_sample(3, &mut init_rng(2));
    for row in &mut sample.target.nodes {
        for v in row.iter_mut() {
            *v = 1e308;
        }
    }
    let data = dir.path().join("d.jsonl");
    let mut buf = Vec::new();
    write_samples(&mut buf, std::slice::from_ref(&sample)).unwrap();
    fs::write(&data, buf).unwrap();

    let run = dir.path().join("run");
    let res = gn(&[
        "train", "--task", "physics", "--data", path_str(&data), "--steps", "3", "--seed", "5",
        "--out-dir", path_str(&run),
    ]);
    assert_eq!(res.status.code(), Some(3));
    assert!(stderr_of(&res).contains("non-finite"));

    let mut expected = ParameterStore::new();
    let task = TaskKind::Physics;
    init_epd_params(
        &mut expected,
        &mut init_rng(5),
        &default_architecture(task),
        task.input_dims(),
    )
    .unwrap();
    assert_eq!(
        fs::read_to_string(run.join("checkpoint.json")).unwrap(),
        expected.to_json(),
        "checkpoint must hold the untouched initialization"
    );
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv")).unwrap(),
        "step,loss,rmse\n"
    );
}

#[test]
fn thread_count_zero_is_rejected() {
    let res = gn(&["--threads", "0", "rollout", "--steps", "0", "--oracle", "--out", "/tmp/x"]);
    assert_eq!(res.status.code(), Some(2));
}
