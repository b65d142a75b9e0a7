use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "seed": 3,
  "dim": 8,
  "text": {"raw_dim": 64},
  "gnn": {"heads": 2},
  "stage1": {"lr": 0.01, "epochs": 4, "batch_size": 16},
  "stage2": {"lr": 0.01, "epochs": 6}
}"#;

fn kgreason(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgreason")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kgreason(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    kgreason(args).status.code().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("config.json"), CONFIG).unwrap();
        Workspace { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_owned()
    }

    fn prepare(&self) {
        ok(&["generate-synthetic", "--affairs", "24", "--laws", "3", "--provisions", "4", "--seed", "2", "--out", &self.p("data")]);
        ok(&["split", "--data", &self.p("data"), "--holdout", "base_entry_is", "--fraction", "0.2", "--seed", "2"]);
    }

    fn train(&self) {
        ok(&["train-text", "--data", &self.p("data"), "--config", &self.p("config.json"), "--out", &self.p("s1.ckpt"), "--log", &self.p("log.jsonl")]);
        ok(&["train-graph", "--data", &self.p("data"), "--stage1", &self.p("s1.ckpt"), "--out", &self.p("s2.ckpt"), "--log", &self.p("log.jsonl")]);
    }
}

#[test]
fn full_workflow() {
    let ws = ws_trained();
    let log = std::fs::read_to_string(ws.root.join("log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4 + 6);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["stage"], if i < 4 { 1 } else { 2 });
        for key in ["epoch", "loss", "lr", "wall_ms"] {
            assert!(r.get(key).is_some(), "missing {key} in {r}");
        }
    }

    let reports: Value = serde_json::from_str(&ok(&["eval", "--data", &ws.p("data"), "--checkpoint", &ws.p("s2.ckpt")])).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["protocol"], "raw");
    assert_eq!(reports[1]["protocol"], "filtered");
    assert!(reports[1]["mrr"].as_f64().unwrap() >= reports[0]["mrr"].as_f64().unwrap());
    assert!(reports[1]["per_relation"]["base_entry_is"].is_object());

    let tsv = ok(&["eval", "--data", &ws.p("data"), "--checkpoint", &ws.p("s2.ckpt"), "--on", "test", "--protocol", "filtered", "--format", "tsv"]);
    assert_eq!(tsv.lines().count(), 2);

    let pred: Value = serde_json::from_str(&ok(&[
        "predict", "--data", &ws.p("data"), "--checkpoint", &ws.p("s2.ckpt"),
        "--entity", "affair_0000", "--relation", "base_entry_is", "--k", "5", "--exclude-known",
    ]))
    .unwrap();
    assert_eq!(pred["candidates"].as_array().unwrap().len(), 5);
    let scores: Vec<f64> = pred["candidates"].as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]), "TransE candidates must be ascending: {scores:?}");

    ok(&["export-embeddings", "--data", &ws.p("data"), "--checkpoint", &ws.p("s2.ckpt"), "--out", &ws.p("emb.tsv")]);
    let (names, table) = kgreason::eval::load_embeddings(Path::new(&ws.p("emb.tsv"))).unwrap();
    assert_eq!(names.len(), table.rows());
    assert_eq!(table.cols(), 8);
    assert_eq!(names[0], "affair_0000");

    let report: Value = serde_json::from_str(&ok(&["grad-check", "--data", &ws.p("data"), "--checkpoint", &ws.p("s2.ckpt"), "--max-coords", "200"])).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4, "{report}");
}

fn ws_trained() -> Workspace {
    let ws = Workspace::new();
    ws.prepare();
    ws.train();
    ws
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ws = ws_trained();
    let data = ws.p("data");
    let cfg = ws.p("config.json");
    ok(&["train-text", "--data", &data, "--config", &cfg, "--out", &ws.p("half1.ckpt"), "--until-epoch", "2"]);
    ok(&["train-text", "--data", &data, "--resume", &ws.p("half1.ckpt"), "--out", &ws.p("full1.ckpt")]);
    assert_eq!(std::fs::read(ws.root.join("full1.ckpt")).unwrap(), std::fs::read(ws.root.join("s1.ckpt")).unwrap());

    let s1 = ws.p("s1.ckpt");
    ok(&["train-graph", "--data", &data, "--stage1", &s1, "--out", &ws.p("half2.ckpt"), "--until-epoch", "3"]);
    ok(&["train-graph", "--data", &data, "--resume", &ws.p("half2.ckpt"), "--out", &ws.p("full2.ckpt")]);
    assert_eq!(std::fs::read(ws.root.join("full2.ckpt")).unwrap(), std::fs::read(ws.root.join("s2.ckpt")).unwrap());
}

#[test]
fn ingest_then_split_by_ratio() {
    let ws = Workspace::new();
    let triples = ws.root.join("raw.tsv");
    let mut body = String::new();
    for i in 0..30 {
        body.push_str(&format!("e{i}\tlinks\te{}\n", (i * 7 + 3) % 30));
        body.push_str(&format!("e{i}\tnear\te{}\n", (i + 1) % 30));
    }
    body.push_str("e0\tlinks\te3\n");
    std::fs::write(&triples, body).unwrap();
    std::fs::write(ws.root.join("texts.jsonl"), "{\"id\":\"e1\",\"text\":\"first\"}\n").unwrap();
    ok(&["ingest", "--triples", triples.to_str().unwrap(), "--texts", &ws.p("texts.jsonl"), "--out", &ws.p("ds")]);
    let counts: Value = serde_json::from_str(&ok(&["split", "--data", &ws.p("ds"), "--ratios", "0.8,0.1,0.1", "--target", "links"])).unwrap();
    assert_eq!(counts["train"].as_u64().unwrap() + counts["dev"].as_u64().unwrap() + counts["test"].as_u64().unwrap(), 60);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(ws.root.join("ds/split.json")).unwrap()).unwrap();
    assert_eq!(manifest["target_relation"], "links");
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    ws.prepare();
    let data = ws.p("data");
    // data errors
    assert_eq!(code(&["eval", "--data", &data, "--checkpoint", &ws.p("missing.ckpt")]), 3);
    assert_eq!(code(&["split", "--data", &ws.p("nowhere")]), 3);
    assert_eq!(code(&["split", "--data", &data, "--target", "no_such_relation"]), 3);
    // config errors
    assert_eq!(code(&["split", "--data", &data, "--ratios", "0.5,0.5,0.5"]), 2);
    assert_eq!(code(&["train-text", "--data", &data, "--out", &ws.p("x"), "--depth", "0"]), 2);
    std::fs::write(ws.root.join("bad.json"), "{\"dim\": 8, \"unknown_knob\": 1}").unwrap();
    assert_eq!(code(&["train-text", "--data", &data, "--out", &ws.p("x"), "--config", &ws.p("bad.json")]), 2);
    ok(&["train-text", "--data", &data, "--config", &ws.p("config.json"), "--out", &ws.p("s1.ckpt"), "--until-epoch", "1"]);
    assert_eq!(code(&["train-text", "--data", &data, "--resume", &ws.p("s1.ckpt"), "--out", &ws.p("y"), "--score", "distmult"]), 2);
    // a stage-1 checkpoint cannot resume stage 2
    assert_eq!(code(&["train-graph", "--data", &data, "--resume", &ws.p("s1.ckpt"), "--out", &ws.p("y")]), 2);
    // corrupt checkpoint
    std::fs::write(ws.root.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--data", &data, "--checkpoint", &ws.p("junk.ckpt")]), 3);
    // numeric failure: a learning rate that blows up the loss
    std::fs::write(ws.root.join("hot.json"), r#"{"dim": 8, "text": {"raw_dim": 64}, "stage1": {"lr": 1e300, "epochs": 50, "warmup_fraction": 0.0}}"#).unwrap();
    let out = kgreason(&["train-text", "--data", &data, "--config", &ws.p("hot.json"), "--out", &ws.p("z")]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
}
