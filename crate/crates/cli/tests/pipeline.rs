//! The binary end to end on a small synthetic dump.

use std::path::Path;
use std::process::{Command, Output};

use convctl_core::evalgen::{perplexity, LoadedModel};
use convctl_core::Execution;

fn convctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convctl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = convctl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn record(id: &str, parent: Option<&str>, post: &str, author: &str, body: &str, t: i64) -> String {
    serde_json::json!({
        "id": id, "parent_id": parent, "link_id": post, "author": author, "body": body,
        "score": 10, "subreddit": "talk", "over_18": false, "created_utc": t
    })
    .to_string()
}

/// Two posts, each holding a six-turn alice/bob chain, plus stray replies
/// that only feed the reference store.
fn write_dump(path: &Path) {
    let mut lines = Vec::new();
    for p in 0..2 {
        let post = format!("t3_p{p}");
        let mut parent = post.clone();
        for t in 0..6 {
            let id = format!("c{p}{t}");
            let author = ["alice", "bob"][t % 2];
            lines.push(record(&id, Some(&parent), &post, author, &format!("turn {t} of thread {p} here"), t as i64));
            parent = format!("t1_{id}");
        }
    }
    lines.push(record("x1", Some("t3_q"), "t3_q", "carol", "what does everyone think", 1));
    lines.push(record("x2", Some("t1_x1"), "t3_q", "alice", "i think it is fine", 2));
    lines.push(record("x3", Some("t3_q"), "t3_q", "bob", "bob speaking at the top", 3));
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    write_dump(&dir.path().join("dump.jsonl"));

    let ingest: serde_json::Value = serde_json::from_str(&ok(&["ingest", &p("dump.jsonl")])).unwrap();
    assert_eq!((ingest["records_read"].as_u64(), ingest["forests_built"].as_u64()), (Some(15), Some(3)), "{ingest}");

    let stats = ok(&[
        "extract", &p("dump.jsonl"), "--conversations", &p("convs.jsonl"), "--references", &p("refs.jsonl"),
    ]);
    let stats: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(stats["conversations"], 2, "{stats}");
    assert_eq!(stats["users"], 2);
    assert!(stats["reference_tuples"].as_u64().unwrap() >= 2);
    let again = ok(&["stats", "--conversations", &p("convs.jsonl"), "--references", &p("refs.jsonl")]);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&again).unwrap(), stats);

    ok(&["tokenize", "--conversations", &p("convs.jsonl"), "--references", &p("refs.jsonl"), "--vocab-size", "300", "--tokenizer", &p("tok.bpe")]);
    ok(&["encode", "--conversations", &p("convs.jsonl"), "--references", &p("refs.jsonl"), "--tokenizer", &p("tok.bpe"), "--dataset", &p("data.bin")]);
    ok(&[
        "--seed", "4", "train", "--dataset", &p("data.bin"), "--tokenizer", &p("tok.bpe"), "--model-dir", &p("model"),
        "--hidden-size", "16", "--num-layers", "1", "--num-heads", "2", "--max-positions", "256",
        "--total-iters", "6", "--batch-size", "2", "--peak-lr", "1e-3",
    ]);
    let metrics = std::fs::read_to_string(dir.path().join("model/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7, "{metrics}");

    let eval_args = ["eval", "--model-dir", &p("model"), "--conversations", &p("convs.jsonl"), "--references", &p("refs.jsonl")];
    let parallel = ok(&eval_args);
    let mut seq_args = vec!["--sequential"];
    seq_args.extend(eval_args);
    assert_eq!(ok(&seq_args), parallel);
    let model = LoadedModel::load_dir(&dir.path().join("model")).unwrap();
    let convs = convctl_cli::load_conversations(&dir.path().join("convs.jsonl")).unwrap();
    let store = convctl_cli::load_references(Some(&dir.path().join("refs.jsonl"))).unwrap();
    let report = perplexity(&model, &convs, &store, Execution::Sequential).unwrap();
    assert_eq!(parallel.trim_end(), serde_json::to_string(&report).unwrap());

    let sample = |out: &str| {
        ok(&[
            "--seed", "9", "sample", "--model-dir", &p("model"), "--conversations", &p("convs.jsonl"),
            "--references", &p("refs.jsonl"), "--schedule", "alice,bob", "--max-new-tokens", "5", "--out", &p(out),
        ]);
        std::fs::read_to_string(p(out)).unwrap()
    };
    let first = sample("s1.jsonl");
    assert_eq!(sample("s2.jsonl"), first, "seeded sampling repeats");
    let extended = convctl_cli::load_conversations(&dir.path().join("s1.jsonl")).unwrap();
    assert_eq!(extended[0].turns.len(), convs[0].turns.len() + 2);
    let side = std::fs::read_to_string(p("s1.jsonl.logprobs.jsonl")).unwrap();
    assert_eq!(side.lines().count(), 2);
}

#[test]
fn stats_on_empty_corpus_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let convs = dir.path().join("empty.jsonl");
    std::fs::write(&convs, "").unwrap();
    let out = ok(&["stats", "--conversations", convs.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v, serde_json::json!({"conversations": 0, "turns": 0, "users": 0, "reference_tuples": 0}));
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    let out = convctl(&["stats", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = convctl(&["stats", "--conversations", "/nonexistent/convs.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().find(|l| l.starts_with("error: ")).unwrap();
    assert!(line.contains("/nonexistent/convs.jsonl"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"unknown_key": 1}}"#).unwrap();
    let out = convctl(&["--config", bad.to_str().unwrap(), "stats"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("unknown_key"));
}
