mod common;

use std::path::Path;
use std::process::{Command, Output};

fn smartreply(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smartreply"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&smartreply(dir.path(), &["--help"])), 0);
    assert_eq!(code(&smartreply(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&smartreply(dir.path(), &["gen-corpus", "--no-such-flag"])), 1);
    assert_eq!(code(&smartreply(dir.path(), &["eval", "--rankers", "matching,bogus"])), 1);
}

#[test]
fn missing_prerequisites_and_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = smartreply(dir.path(), &["train-matching"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("gen-corpus"), "{}", stderr(&o));

    let o = smartreply(dir.path(), &["--config", "/nonexistent/config.json", "gen-corpus"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = smartreply(dir.path(), &["--config", bad.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn full_lifecycle_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let cfg = w.join("config.json");
    std::fs::write(&cfg, serde_json::to_string(&common::small_config()).unwrap()).unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        let o = smartreply(w, &full);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };

    run(&["gen-corpus", "--pairs", "1500", "--seed", "3"]);
    assert!(w.join("corpus.tsv").exists());
    run(&["gen-corpus", "--pairs", "20", "--out", w.join("tiny.tsv").to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(w.join("tiny.tsv")).unwrap().lines().count(), 20);

    run(&["train-matching", "--epochs", "1"]);
    run(&["train-lm", "--order", "3"]);
    run(&["build-response-set", "--lm-top", "80"]);
    run(&["train-cvae", "--epochs", "1", "--z-dim", "16"]);

    let o = run(&["eval", "--rankers", "matching-nolc,mmr,mcvae", "--messages", "30"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["ranker"].as_str().unwrap()).collect();
    assert_eq!(names, ["matching-nolc", "mmr", "mcvae"]);
    assert!(w.join("eval.json").exists());

    let o = run(&["bench", "--queries", "5", "--warmup", "1"]);
    let bench: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(bench["rows"].as_array().unwrap().len(), 4);
    assert!(bench["analytic"]["scoring_ratio"].as_f64().unwrap() > 1.0);

    let suggest = |ranker: &str| {
        let o = run(&["suggest", "--message", "Want to meet up for lunch?", "--ranker", ranker, "--seed", "5"]);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let texts: Vec<String> =
            v["suggestions"].as_array().unwrap().iter().map(|s| s["text"].as_str().unwrap().to_string()).collect();
        assert!(!texts.is_empty() && texts.len() <= 3, "{texts:?}");
        texts
    };
    assert_eq!(suggest("mcvae"), suggest("mcvae"));
    suggest("matching");

    let o = smartreply(w, &["--config", cfg, "suggest", "--message", "lunch?", "--k", "1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
