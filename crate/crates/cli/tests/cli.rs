use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trc_core::corpus::{Split, TemporalRelation};
use trc_core::fixtures::{synthetic_records, SplitPlan, TriggerWords};

use TemporalRelation::*;

fn trc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trc")).args(args).output().expect("binary runs")
}

fn write_corpus(dir: &Path, plans: &[SplitPlan], triggers: TriggerWords) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let lines: Vec<String> = synthetic_records(plans, triggers, 7)
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn small_corpus(dir: &Path) -> PathBuf {
    write_corpus(
        dir,
        &[
            SplitPlan::new(Split::Train, &[(After, 2), (Before, 2), (Equal, 2)], 3),
            SplitPlan::new(Split::Test, &[(After, 2), (Before, 1), (Equal, 1)], 2),
        ],
        TriggerWords::Random,
    )
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_writes_stats() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("out");
    let o = trc(&["ingest", "--corpus", s(&corpus), "--scheme", "matres", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = read_json(&out.join("reports/corpus_stats.json"));
    assert_eq!(stats["data"]["split_sizes"]["test"], 4);
    assert_eq!(stats["data"]["classes"].as_array().unwrap().len(), 3);
    assert!(stats["meta"]["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn ingest_rejects_truncated_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let text = fs::read_to_string(&corpus).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let broken = format!("{}\n{}\n{}\n", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    fs::write(&corpus, broken).unwrap();
    let o = trc(&["ingest", "--corpus", s(&corpus), "--scheme", "matres", "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn tbdense_has_five_classes() {
    let dir = tempfile::tempdir().unwrap();
    let all = [(After, 1), (Before, 1), (Equal, 1), (Includes, 1), (IsIncluded, 1)];
    let corpus = write_corpus(dir.path(), &[SplitPlan::new(Split::Test, &all, 2)], TriggerWords::Random);
    let out = dir.path().join("out");
    let o = trc(&["ingest", "--corpus", s(&corpus), "--scheme", "tbdense", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = read_json(&out.join("reports/corpus_stats.json"));
    assert_eq!(stats["data"]["classes"].as_array().unwrap().len(), 5);
}

#[test]
fn missing_seed_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let o = trc(&["ingest", "--corpus", s(&corpus), "--scheme", "matres"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn qa1_run_asks_three_questions_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let script = dir.path().join("mock.json");
    fs::write(&script, r#"{"rules": [{"contains": "happen before", "reply": "YES"}], "default": "NO"}"#).unwrap();
    let out = dir.path().join("out");
    let o = trc(&[
        "run", "--corpus", s(&corpus), "--scheme", "matres", "--protocol", "qa1", "--backend", "mock",
        "--mock-script", s(&script), "--sets", "2", "--seed", "3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let transcripts = fs::read_to_string(out.join("transcripts/qa1.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = transcripts.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 8);
    for set in [0, 1] {
        let calls: usize = rows
            .iter()
            .filter(|r| r["set_id"] == set)
            .map(|r| r["exchanges"].as_array().unwrap().len())
            .sum();
        assert_eq!(calls, 12);
    }
    let report = read_json(&out.join("reports/qa1.json"));
    // Every prediction is BEFORE; one of four test pairs is BEFORE.
    assert!((report["aggregate"]["mean_micro_f1"].as_f64().unwrap() - 0.25).abs() < 1e-12);
    assert!(out.join("reports/qa1.md").exists() && out.join("fewshot_sets.json").exists());
}

#[test]
fn backend_failures_exit_3_and_keep_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let script = dir.path().join("mock.json");
    fs::write(&script, r#"{"default": {"fail": 400}}"#).unwrap();
    let out = dir.path().join("out");
    let o = trc(&[
        "run", "--corpus", s(&corpus), "--scheme", "matres", "--backend", "mock", "--mock-script", s(&script),
        "--sets", "0", "--seed", "3", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let failures = fs::read_to_string(out.join("predictions/p.failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 1 + 4);
}

#[test]
fn full_fine_tuning_needs_a_trainable_provider() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "seed = 1\ncorpus = {:?}\nscheme = \"matres\"\nout = {:?}\n\n[provider]\ntrainable = false\n",
            s(&corpus),
            s(&dir.path().join("out"))
        ),
    )
    .unwrap();
    let o = trc(&["train", "--config", s(&config), "--mode", "full", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_predict_attribute_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(
        dir.path(),
        &[
            SplitPlan::new(Split::Train, &[(After, 30), (Before, 30), (Equal, 30)], 45),
            SplitPlan::new(Split::Dev, &[(After, 10), (Before, 10), (Equal, 10)], 15),
            SplitPlan::new(Split::Test, &[(After, 4), (Before, 4), (Equal, 4)], 6),
        ],
        TriggerWords::ByClass,
    );
    let out = dir.path().join("out");
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        serde_json::json!({
            "seed": 5,
            "corpus": corpus,
            "scheme": "matres",
            "out": out,
            "train": {"head_lr": 1e-2, "epochs": 50},
            "attribution": {"max_instances": 3},
        })
        .to_string(),
    )
    .unwrap();
    let c = s(&config);
    let o = trc(&["train", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("encoder lr 0.00001") && stdout.contains("head lr 0.01"), "{stdout}");
    let head = read_json(&out.join("checkpoints/head.json"));
    assert_eq!(head["data"]["best_dev_micro_f1"], 1.0);
    assert!(!out.join("checkpoints/provider.json").exists());

    let o = trc(&["predict", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = fs::read_to_string(out.join("predictions/encoder.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 12);

    let o = trc(&["attribute", "--config", c, "--attr-model", "encoder", "--samples", "256"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("attributions/encoder_summary.json"));
    assert_eq!(summary["data"]["instances"], 3);
    assert_eq!(summary["data"]["baseline"], "<mask>");
}

#[test]
fn last_token_attribution_peaks_at_the_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("out");
    let o = trc(&[
        "attribute", "--corpus", s(&corpus), "--scheme", "matres", "--attr-model", "last-token", "--sets", "1",
        "--seed", "2", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("attributions/last-token_summary.json"));
    assert_eq!(summary["data"]["median"], 1.0);
    assert_eq!(summary["data"]["k"], 5);
    let csv = fs::read_to_string(out.join("attributions/last-token_positions.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    let records = fs::read_to_string(out.join("attributions/last-token.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(records.lines().nth(1).unwrap()).unwrap();
    assert_eq!(first["top_k"].as_array().unwrap().len(), 5);
}
