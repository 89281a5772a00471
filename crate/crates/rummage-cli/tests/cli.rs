//! End-to-end checks of the `rummage` binary: exit codes, output files, and
//! byte-level determinism of repeated runs.

use std::path::Path;
use std::process::{Command, Output};

fn rummage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rummage"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).expect("output file exists")
}

#[test]
fn gen_scenes_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = rummage(&[
            "gen-scenes",
            "--count",
            "4",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(read(out_a.join("scenes.jsonl")), read(out_b.join("scenes.jsonl")));
    assert!(out_a.join("summary.json").exists());
    assert!(out_a.join("config.toml").exists());
}

#[test]
fn train_zero_steps_writes_initial_checkpoint_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = rummage(&[
            "train",
            "--set",
            "ppo.total_steps=0",
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let ckpt_a = read(out_a.join("xpg/checkpoint.json"));
    assert_eq!(ckpt_a, read(out_b.join("xpg/checkpoint.json")));
    let log = read(out_a.join("xpg/training_log.csv"));
    assert!(log.starts_with(b"iteration,mean_return"));
}

#[test]
fn eval_without_checkpoint_runs_fixed_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let res = rummage(&[
        "eval",
        "--methods",
        "fixed_threshold",
        "--object-counts",
        "4",
        "--n-scenes",
        "5",
        "--seed",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let metrics = String::from_utf8(read(out.join("metrics.csv"))).unwrap();
    assert!(metrics.starts_with("method,n_objects,"));
    assert!(metrics.contains("fixed_threshold,4,5,"));
    assert!(out.join("episodes.jsonl").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn eval_is_byte_identical_across_runs_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out = dir.path().join(name);
        let res = rummage(&[
            "eval",
            "--methods",
            "fixed_threshold",
            "--object-counts",
            "6",
            "--n-scenes",
            "8",
            "--seed",
            "400",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
        outputs.push((read(out.join("metrics.csv")), read(out.join("episodes.jsonl"))));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2], "parallel evaluation must not change results");
}

#[test]
fn eval_unknown_method_is_usage_error() {
    let res = rummage(&["eval", "--methods", "warp_drive"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown method"));
}

#[test]
fn eval_learned_method_without_checkpoint_fails() {
    let res = rummage(&["eval", "--methods", "xpg", "--n-scenes", "1"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("checkpoint"));
}

#[test]
fn bad_override_fails() {
    let res = rummage(&["gen-scenes", "--set", "ppo.not_a_key=3"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn replay_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let eval_out = dir.path().join("eval");
    let res = rummage(&[
        "eval",
        "--methods",
        "fixed_threshold",
        "--object-counts",
        "6",
        "--n-scenes",
        "3",
        "--seed",
        "300",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let episodes = eval_out.join("episodes.jsonl");

    // Honest replay: succeeds and writes per-step images.
    let replay_out = dir.path().join("replay");
    let res = rummage(&[
        "replay",
        "--episodes",
        episodes.to_str().unwrap(),
        "--index",
        "0",
        "--seed",
        "300",
        "--out",
        replay_out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(replay_out.join("step_00_mask.png").exists());
    assert!(replay_out.join("step_00_odm.png").exists());

    // Tampered action trace: integrity exit code.
    let text = std::fs::read_to_string(&episodes).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[0] = lines[0].replace("\"grasp_target\"", "\"remove_occluder\",\"id\":999");
    let tampered = dir.path().join("tampered.jsonl");
    std::fs::write(&tampered, lines.join("\n")).unwrap();
    let res = rummage(&[
        "replay",
        "--episodes",
        tampered.to_str().unwrap(),
        "--index",
        "0",
        "--seed",
        "300",
        "--out",
        dir.path().join("replay2").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));

    // Out-of-range index: runtime error.
    let res = rummage(&[
        "replay",
        "--episodes",
        episodes.to_str().unwrap(),
        "--index",
        "99",
        "--out",
        dir.path().join("replay3").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn train_rejects_untrainable_method() {
    let res = rummage(&["train", "--method", "fixed_threshold"]);
    assert_eq!(res.status.code(), Some(1));
}
