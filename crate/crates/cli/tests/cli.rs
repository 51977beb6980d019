use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctarate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctarate"))
        .args(args)
        .env("CTA_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ctarate(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

#[test]
fn generate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        ok(&["generate", "--seed", "1", "--n", "200", "--out", p(out)]);
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 200);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    fs::write(&cfg, "[generator]\nseed = 5\nn_conversations = 30\n").unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["generate", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["generate", "--config", p(&cfg), "--n", "12", "--out", p(&b)]);
    let lines = |f: &Path| fs::read_to_string(f).unwrap().lines().map(String::from).collect::<Vec<_>>();
    let (la, lb) = (lines(&a), lines(&b));
    assert_eq!(la.len(), 30);
    assert_eq!(lb.len(), 12);
    assert_eq!(&la[..12], &lb[..]);
}

#[test]
fn extract_writes_one_row_per_conversation() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, csv) = (dir.path().join("c.jsonl"), dir.path().join("f.csv"));
    ok(&["generate", "--seed", "2", "--n", "25", "--out", p(&corpus)]);
    ok(&["extract", "--corpus", p(&corpus), "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("conversation_id,rating,session_duration_s"));
    assert_eq!(text.lines().count(), 26);
}

#[test]
fn report_importance_lists_fourteen_signed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let out = dir.path().join("lr");
    ok(&["generate", "--seed", "3", "--n", "300", "--out", p(&corpus)]);
    ok(&["train", "--corpus", p(&corpus), "--model", "lr", "--seeds", "13", "--out-dir", p(&out)]);
    let csv = dir.path().join("importance.csv");
    ok(&["report-importance", "--checkpoint", p(&out.join("lr-seed13.ckpt")), "--k", "14", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 14);
    assert!(rows.iter().any(|r| r.contains(",-")));
    assert!(rows.iter().any(|r| !r.split(',').nth(2).unwrap().starts_with('-')));
}

#[test]
fn evaluate_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        "[train]\nmax_epochs = 2\n[train.serialization]\nmax_len = 48\n\
         [train.encoder]\nd_model = 16\nn_layers = 1\nn_heads = 2\nffn_dim = 32\n",
    )
    .unwrap();
    let out = dir.path().join("tb");
    ok(&["generate", "--seed", "4", "--n", "120", "--out", p(&corpus)]);
    ok(&[
        "train", "--corpus", p(&corpus), "--model", "tbrater", "--config", p(&cfg), "--seeds", "42", "--out-dir",
        p(&out),
    ]);
    let eval = ok(&["evaluate", "--checkpoint", p(&out.join("tbrater-seed42.ckpt")), "--corpus", p(&corpus)]);
    let trained = fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(String::from_utf8(eval.stdout).unwrap(), trained);
}

#[test]
fn missing_input_fails_and_names_the_path() {
    let out = ctarate(&["extract", "--corpus", "/nonexistent/c.jsonl", "--out", "/tmp/never.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/c.jsonl"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = ctarate(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
