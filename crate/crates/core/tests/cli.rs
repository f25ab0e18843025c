use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_agg-dst"));
    c.env_remove("AGG_DST_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&["synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&out)]);
    out
}

fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "model": { "word_dim": 8, "char_dim": 4, "hidden": 12 },
        "train": { "epochs": epochs, "batch_size": 4, "lr": 0.01 }
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn synth_writes_header_plus_one_line_per_dialogue() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.jsonl", 100, 4);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 101);
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(header["catalog"].as_array().unwrap().len() >= 12);

    let b = synth(dir.path(), "b.jsonl", 100, 4);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let again = run(&["synth", "--n", "5", "--out", p(&a)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["synth", "--n", "5", "--out", p(&a), "--force"]);
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 6);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert!(Path::new(manifest["outputs"]["corpus"].as_str().unwrap()).is_absolute());
    assert!(manifest["finished"].is_string());
}

#[test]
fn train_writes_one_checkpoint_per_seed_and_logs_example_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "train.jsonl", 6, 1);
    let cfg = tiny_config(dir.path(), 1);
    let out = dir.path().join("run");
    let res = ok(&[
        "train", "--corpus", p(&corpus), "--dev", p(&corpus), "--config", p(&cfg),
        "--regime", "weak-final", "--seeds", "1", "--out", p(&out),
    ]);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("regime weak-final: 6 training examples from 6 dialogues"), "{stderr}");
    assert!(out.join("seed-1/checkpoint.json").is_file());
    assert!(out.join("seed-1/metrics.json").is_file());
    let seeds: Vec<_> = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("seed-")).collect();
    assert_eq!(seeds.len(), 1);

    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["examples"], 6);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([1]));
    assert_eq!(manifest["config"]["train"]["regime"], "weak-final");
    assert!(Path::new(manifest["inputs"]["corpus"].as_str().unwrap()).is_absolute());
    let stdout: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(stdout["dev.joint_goal_accuracy"]["mean"].is_number());

    // A second run into the same directory needs --force.
    let again = run(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--seeds", "1", "--out", p(&out)]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn usage_and_io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "c.jsonl", 3, 1);
    let missing = dir.path().join("nope.json");
    let out = run(&["train", "--corpus", p(&corpus), "--config", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let garbage = dir.path().join("bad.json");
    fs::write(&garbage, "not json").unwrap();
    let out = run(&["eval", "--checkpoint", p(&garbage), "--corpus", p(&corpus)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["eval", "--checkpoint", p(&missing), "--corpus", p(&corpus)]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    let other = if cfg!(feature = "f32") { "f64" } else { "f32" };
    let out = run(&["train", "--corpus", p(&corpus), "--out", p(&dir.path().join("o2")), "--precision", other]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["sweep", "--corpus", p(&corpus), "--dev", p(&corpus), "--rates", "0.5,1.5", "--out", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
}

/// Single-turn dialogues with empty states; a briefly trained model
/// predicts none everywhere.
fn empty_state_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("empty.jsonl");
    let mut text = String::from(r#"{"catalog":[{"domain":"taxi","slot":"destination"},{"domain":"hotel","slot":"area"}]}"#);
    text.push('\n');
    for (i, u) in ["hello there", "good morning", "hi", "anyone there ?"].iter().enumerate() {
        text.push_str(&format!(
            r#"{{"id":"e{i}","turns":[{{"agent":"","user":"{u}"}}],"states":[{{}}]}}"#
        ));
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn eval_reports_perfect_joint_accuracy_on_an_oracle_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = empty_state_corpus(dir.path());
    let cfg = tiny_config(dir.path(), 30);
    let out = dir.path().join("run");
    ok(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--seeds", "2", "--out", p(&out)]);
    let ckpt = out.join("seed-2/checkpoint.json");
    let res = ok(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--predictions"]);
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["joint_goal_accuracy"], 1.0);
    assert_eq!(report["slot_accuracy"], 1.0);
    assert_eq!(report["turns"], 4);
    assert!(report.get("average_goal_accuracy").is_none());
    assert_eq!(report["predictions"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_domain_filter_and_attention_table() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "c.jsonl", 12, 3);
    let cfg = tiny_config(dir.path(), 1);
    let out = dir.path().join("run");
    ok(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--seeds", "1", "--out", p(&out)]);
    let ckpt = out.join("seed-1/checkpoint.json");

    let text = fs::read_to_string(&corpus).unwrap();
    let taxi = text.lines().skip(1).filter(|l| {
        let v: Value = serde_json::from_str(l).unwrap();
        v["domains"].as_array().unwrap().iter().any(|d| d == "taxi")
    });
    let expected = taxi.count();
    let res = ok(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--domain", "taxi"]);
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["dialogues"].as_u64().unwrap() as usize, expected);

    let first: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    let res = ok(&["attn", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--dialogue", id, "--turn", "1", "--slots", "taxi-destination,hotel-area"]);
    let table = String::from_utf8(res.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "dialogue_id\tturn\tslot\tposition\ttoken\tweight");
    let user_len = first["turns"][0]["user"].as_str().unwrap().split_whitespace().count();
    assert!(rows.len() > 1 + user_len);
    let weights: f64 = rows[1..]
        .iter()
        .filter(|r| r.split('\t').nth(2) == Some("taxi-destination"))
        .map(|r| r.rsplit('\t').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((weights - 1.0).abs() < 1e-6);

    let res = ok(&["attn", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--dialogue", id, "--format", "jsonl"]);
    let lines = String::from_utf8(res.stdout).unwrap();
    assert_eq!(lines.lines().count(), first_catalog_len(&text));

    let trade_out = dir.path().join("trade");
    ok(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--seeds", "1", "--variant", "trade", "--out", p(&trade_out)]);
    let res = run(&["attn", "--checkpoint", p(&trade_out.join("seed-1/checkpoint.json")), "--corpus", p(&corpus), "--dialogue", id]);
    assert_eq!(res.status.code(), Some(2));
}

fn first_catalog_len(text: &str) -> usize {
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    header["catalog"].as_array().unwrap().len()
}

#[test]
fn sweep_emits_one_row_per_rate_and_variant_plus_weak_references() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "c.jsonl", 8, 5);
    let cfg = tiny_config(dir.path(), 1);
    let out = dir.path().join("sweep");
    let res = ok(&[
        "sweep", "--corpus", p(&corpus), "--dev", p(&corpus), "--config", p(&cfg),
        "--rates", "0.5,1.0", "--variants", "agg", "--weak-variants", "agg", "--seeds", "1", "--out", p(&out),
    ]);
    let rows: Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["rate"], 0.5);
    assert_eq!(rows[0]["dialogues"], 4.0);
    assert_eq!(rows[2]["regime"], "weak-final");
    let table = String::from_utf8(res.stdout).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(fs::read_to_string(out.join("sweep.tsv")).unwrap(), table);

    let single = dir.path().join("single");
    ok(&[
        "sweep", "--corpus", p(&corpus), "--dev", p(&corpus), "--config", p(&cfg),
        "--rates", "1.0", "--variants", "trade", "--weak-variants", "agg", "--seeds", "1", "--out", p(&single),
    ]);
    let rows: Value = serde_json::from_str(&fs::read_to_string(single.join("sweep.json")).unwrap()).unwrap();
    let full: Vec<_> = rows.as_array().unwrap().iter().filter(|r| r["regime"] == "full").collect();
    assert_eq!(full.len(), 1);
}

#[test]
fn identical_train_invocations_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "c.jsonl", 5, 9);
    let cfg = tiny_config(dir.path(), 2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["train", "--corpus", p(&corpus), "--dev", p(&corpus), "--config", p(&cfg), "--seeds", "4", "--out", p(out)]);
    }
    assert_eq!(
        fs::read(a.join("seed-4/checkpoint.json")).unwrap(),
        fs::read(b.join("seed-4/checkpoint.json")).unwrap()
    );
}
