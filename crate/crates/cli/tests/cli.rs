use std::path::Path;
use std::process::{Command, Output};

use a2po::harness::run::save_checkpoint;
use a2po::policy::init_params;
use a2po::vocab::Vocabulary;

const SMOKE: &str = "\
# tiny run
steps: 3
suite_beneficial: 4
suite_neutral: 2
suite_harmful: 4
warmstart_tasks_per_class: 10
warmstart_epochs: 20
eval_tasks_per_class: 3
filter_marginal: false
log_level: warn
";

fn a2po(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2po")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.txt", SMOKE);
    let run = dir.path().join("run");
    let out = a2po(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 3 steps"));
    for f in ["config.txt", "checkpoint.bin", "metrics.csv", "trajectories.jsonl", "eval_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let snapshot = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snapshot.lines().any(|l| l == "seed: 3"));

    let ckpt = run.join("checkpoint.bin");
    let tasks = run.join("tasks.jsonl");
    let ev = dir.path().join("eval");
    let out = a2po(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tasks",
        tasks.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("over 10 trajectories"));
    assert!(ev.join("eval_report.json").exists());
}

#[test]
fn bad_config_exits_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.txt", "steps: 3\nstepz: 4\n");
    let out = a2po(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("stepz"), "{err}");

    let cfg = write(dir.path(), "neg.txt", "w_time: -0.5\n");
    assert_eq!(a2po(&["gradcheck", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn eval_rejects_missing_or_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.bin");
    assert_eq!(a2po(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", out_dir]).status.code(), Some(1));

    let foreign = dir.path().join("foreign.bin");
    save_checkpoint(&foreign, &init_params(&Vocabulary::standard(40).unwrap(), 8, 24, 0).unwrap()).unwrap();
    let out = a2po(&["eval", "--checkpoint", foreign.to_str().unwrap(), "--out", out_dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gradcheck_passes_and_reports_worst_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let out = a2po(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS") && stdout.contains("at coordinate"), "{stdout}");
    assert!(dir.path().join("gradcheck.json").exists());
}
