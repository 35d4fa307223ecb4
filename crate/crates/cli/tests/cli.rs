use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
task_demos = 3
prior_demos = 4

[prior]
frames = 60

[vae]
hidden = 8
mlp_hidden = 8
d = 4
epochs = 2
batch_size = 128

[policy]
width = 8
heads = 2
layers = 1
epochs = 2
batch_size = 128

[rollout]
max_steps = 20
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dexlat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "gen-data",
        "retarget",
        "preprocess",
        "train-vae",
        "grid-vae",
        "train-policy",
        "rollout",
        "evaluate",
        "validate",
        "inspect",
    ] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--seed") && text.contains("--config"), "{sub}: {text}");
    }
}

#[test]
fn horizon_violation_exits_with_constraint_code() {
    let out = run(&["rollout", "--horizon", "10", "--l", "10", "--n-shift", "5", "--chunk", "15"]);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("H < n + N - L"), "{err}");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[vae]\nlatent = 3\n").unwrap();
    let out = run(&["validate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["validate", "--run-dir", s(dir.path()), "--data", s(&dir.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_is_byte_identical_across_invocations() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--config", s(&cfg), "--role", "task", "--count", "2", "--seed", "7", "--run-dir", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let da = a.join("data/task");
    let mut names: Vec<_> = std::fs::read_dir(&da).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        assert_eq!(std::fs::read(da.join(&n)).unwrap(), std::fs::read(b.join("data/task").join(&n)).unwrap());
    }
}

#[test]
fn human_frames_retarget_and_validate() {
    let (dir, cfg) = setup();
    let rd = dir.path().join("run");
    let c = s(&cfg);
    let r = s(&rd);
    assert!(run(&["gen-data", "--config", c, "--count", "1", "--human", "--run-dir", r]).status.success());
    let o = run(&["retarget", "--config", c, "--run-dir", r, "--input", s(&rd.join("data/task"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["preprocess", "--config", c, "--run-dir", r, "--data", s(&rd.join("data/retargeted")), "--dtw"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["validate", "--config", c, "--run-dir", r, "--data", s(&rd.join("data/preprocessed"))]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("total_frames"));
}

#[test]
fn evaluate_writes_methods_by_noise_by_seeds_rows() {
    let (dir, cfg) = setup();
    let rd = dir.path().join("run");
    let c = s(&cfg);
    let r = s(&rd);
    assert!(run(&["gen-data", "--config", c, "--role", "prior", "--run-dir", r]).status.success());
    assert!(run(&["gen-data", "--config", c, "--role", "task", "--run-dir", r]).status.success());
    let o = run(&["train-vae", "--config", c, "--run-dir", r, "--data", s(&rd.join("data/prior"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let vae = rd.join("vae.ckpt");
    let o = run(&[
        "evaluate", "--config", c, "--run-dir", r, "--data", s(&rd.join("data/task")), "--vae", s(&vae), "--methods", "latent,direct", "--noise", "on,off",
        "--seeds", "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(rd.join("table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("method,noise,cell,seed,final_error_m,success,steps"));
    assert_eq!(lines.count(), 20);

    let o = run(&["train-policy", "--config", c, "--run-dir", r, "--data", s(&rd.join("data/task")), "--mode", "latent", "--vae", s(&vae)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let policy = rd.join("policy-latent.ckpt");
    let o = run(&["rollout", "--config", c, "--run-dir", r, "--policy", s(&policy), "--data", s(&rd.join("data/task"))]);
    assert_eq!(o.status.code(), Some(2), "latent rollout without a decoder");
    let o = run(&["rollout", "--config", c, "--run-dir", r, "--policy", s(&policy), "--vae", s(&vae), "--data", s(&rd.join("data/task"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(rd.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 20);

    let o = run(&["inspect", s(&policy)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("\"kind\": \"policy\"") && text.contains("vae_digest"));
}

#[test]
fn logs_are_json_lines() {
    let (dir, cfg) = setup();
    let o = run(&["gen-data", "--config", s(&cfg), "--count", "1", "--run-dir", s(&dir.path().join("r"))]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(!err.is_empty());
    for line in err.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("level").is_some());
    }
}
