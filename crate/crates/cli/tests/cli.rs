use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "n_users = 150\nn_items = 200\nmax_epochs = 1\nbatch_size = 64\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sesrec")).args(args).current_dir(dir).env("RUST_LOG", "error").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.ini"), CONFIG).unwrap();
    ok(dir.path(), &["generate-data", "--config", "small.ini", "--out", "data", "--seed", "9"]);
    dir
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ini"), "n_user = 10\n").unwrap();
    let out = run(dir.path(), &["generate-data", "--config", "bad.ini", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_user"));
}

#[test]
fn bad_arguments_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train", "--data", "x"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["analyze", "sweep", "gamma", "--data", "x"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--data", "nowhere", "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = workspace();
    let d = dir.path();
    assert!(d.join("data/events.jsonl").is_file());
    assert!(d.join("data/profiles.json").is_file());

    ok(d, &["train", "--config", "small.ini", "--data", "data", "--out", "m.ckpt", "--seed", "9"]);
    let history = std::fs::read_to_string(d.join("m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "header plus one epoch");

    let out = ok(d, &["evaluate", "--ckpt", "m.ckpt", "--config", "small.ini", "--data", "data", "--seed", "9", "--users", "users.csv"]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["HIT@1", "HIT@5", "HIT@10", "NDCG@5", "NDCG@10", "MRR"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let users = std::fs::read_to_string(d.join("users.csv")).unwrap();
    assert!(users.lines().count() > 1);

    let again = ok(d, &["evaluate", "--ckpt", "m.ckpt", "--config", "small.ini", "--data", "data", "--seed", "9"]);
    assert_eq!(out.stdout, again.stdout);

    let js = ok(d, &["analyze", "js", "--ckpt", "m.ckpt", "--config", "small.ini", "--data", "data", "--seed", "9", "--format", "csv"]);
    let text = String::from_utf8(js.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("user"));

    let dump = ok(d, &["analyze", "dump", "--ckpt", "m.ckpt", "--config", "small.ini", "--data", "data", "--seed", "9"]);
    let records: Vec<serde_json::Value> = serde_json::from_slice(&dump.stdout).unwrap();
    assert!(!records.is_empty());
}

#[test]
fn evaluating_against_other_data_is_rejected() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--config", "small.ini", "--data", "data", "--out", "m.ckpt", "--seed", "9"]);
    std::fs::write(d.join("big.ini"), "n_users = 150\nn_items = 260\n").unwrap();
    ok(d, &["generate-data", "--config", "big.ini", "--out", "other", "--seed", "9"]);
    let out = run(d, &["evaluate", "--ckpt", "m.ckpt", "--data", "other", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let dir = workspace();
    let d = dir.path();
    for name in ["a.ckpt", "b.ckpt"] {
        ok(d, &["train", "--config", "small.ini", "--data", "data", "--out", name, "--seed", "9"]);
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("a.ckpt.history.csv")).unwrap(), std::fs::read(d.join("b.ckpt.history.csv")).unwrap());
}

#[test]
fn sweep_rows_match_requested_values() {
    let dir = workspace();
    let out = ok(dir.path(), &["analyze", "sweep", "alpha", "--values", "0,0.1", "--config", "small.ini", "--data", "data", "--seed", "9", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("param,value"));
    let values: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["0", "0.1"]);
}

#[test]
fn plot_renders_a_histogram_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("v.csv"), "user,x\n1,0.1\n2,0.2\n3,0.9\n").unwrap();
    let args = ["analyze", "plot", "--input", "v.csv", "--column", "x", "--bins", "2", "--min", "0", "--max", "1"];
    let bins: Vec<serde_json::Value> = serde_json::from_slice(&ok(dir.path(), &args).stdout).unwrap();
    let counts: Vec<u64> = bins.iter().map(|b| b["count"].as_u64().unwrap()).collect();
    assert_eq!(counts, [2, 1]);
    let text = String::from_utf8(ok(dir.path(), &[&args[..], &["--format", "csv"]].concat()).stdout).unwrap();
    assert!(text.contains('#'));
    let missing = run(dir.path(), &["analyze", "plot", "--input", "v.csv", "--column", "y"]);
    assert!(!missing.status.success());
}
