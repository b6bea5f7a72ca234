use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 7

[synth]
num_entities = 12
num_relations = 3
facts_per_relation = 8
passages_per_fact = 2

[encoder]
model_dim = 16
entity_dim = 8
relation_dim = 8
key_dim = 8
layers = 1
heads = 2
ff_dim = 32

[batch]
groups_per_batch = 3
hard_negatives = 2

[relation]
steps = 4
batch_size = 4

[finetune]
steps = 4
batch_size = 4

[lm]
steps = 3
batch_size = 4

[questions]
two_hop = 12
"#;

fn vkb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vkb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn vkb")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vkb(dir, args);
    assert!(
        out.status.success(),
        "vkb {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn digest(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// gen-synth, stage 1, memory, finetune, eval. Returns the artifact paths.
fn pipeline(dir: &Path, cfg: &Path) -> Vec<PathBuf> {
    let c = cfg.to_str().unwrap();
    ok(dir, &["--config", c, "gen-synth", "--out", "data"]);
    ok(dir, &["--config", c, "pretrain-relation", "--data", "data", "--out", "pre.ckpt"]);
    ok(dir, &["--config", c, "build-memory", "--data", "data", "--params", "pre.ckpt", "--out", "mem.bin"]);
    ok(
        dir,
        &[
            "--config", c, "finetune-follow", "--data", "data", "--params", "pre.ckpt", "--memory", "mem.bin",
            "--out", "ft.ckpt", "--memory-out", "ft-mem.bin",
        ],
    );
    ["pre.ckpt", "mem.bin", "ft.ckpt", "ft-mem.bin"]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vkb(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vkb(dir.path(), &["pretrain-relation", "--data", "nowhere", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vkb(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn gen_synth_is_reproducible() {
    let (dir, cfg) = workspace();
    let c = cfg.to_str().unwrap();
    let a: Value = serde_json::from_str(&ok(dir.path(), &["--config", c, "gen-synth", "--out", "a"])).unwrap();
    let b: Value = serde_json::from_str(&ok(dir.path(), &["--config", c, "gen-synth", "--out", "b"])).unwrap();
    assert!(a["facts"].as_u64().unwrap() > 0);
    assert_eq!(a["facts"], b["facts"]);
    for name in ["passages.jsonl", "kb.jsonl", "one_hop_test.jsonl", "two_hop_train.jsonl"] {
        assert_eq!(digest(&dir.path().join("a").join(name)), digest(&dir.path().join("b").join(name)), "{name}");
    }
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/dataset.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn end_to_end_pipeline_reports_and_replays() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    let first: Vec<Vec<u8>> = pipeline(d, &cfg).iter().map(|p| digest(p)).collect();

    let report = ok(
        d,
        &[
            "--config", c, "eval", "--data", "data", "--params", "ft.ckpt", "--memory", "ft-mem.bin", "--questions",
            "data/one_hop_test.jsonl", "--kb", "data/kb.jsonl", "--records", "records.jsonl",
        ],
    );
    let v: Value = serde_json::from_str(report.trim()).unwrap();
    let h = v["hits_at_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&h));
    let records = std::fs::read_to_string(d.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count() as u64, v["questions"].as_u64().unwrap());

    let answers = ok(
        d,
        &[
            "--config", c, "query", "--data", "data", "--params", "ft.ckpt", "--memory", "ft-mem.bin",
            "--questions", "data/two_hop_test.jsonl", "--topk", "3",
        ],
    );
    for line in answers.lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        assert!(row["answers"].as_array().unwrap().len() <= 3);
    }

    let manifest: Value = serde_json::from_slice(&std::fs::read(d.join("ft.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "finetune-follow");
    assert!(manifest["artifacts"].as_object().unwrap().contains_key("ft.ckpt"));

    // Same config and seed from scratch: byte-identical artifacts.
    for f in ["pre.ckpt", "mem.bin", "ft.ckpt", "ft-mem.bin"] {
        std::fs::remove_file(d.join(f)).unwrap();
    }
    let second: Vec<Vec<u8>> = pipeline(d, &cfg).iter().map(|p| digest(p)).collect();
    assert!(first == second, "rerun changed an artifact");
}

#[test]
fn lm_ask_and_memory_commands_emit_json() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    pipeline(d, &cfg);
    ok(
        d,
        &[
            "--config", c, "pretrain-lm", "--data", "data", "--params", "pre.ckpt", "--memory", "mem.bin", "--out",
            "lm.ckpt",
        ],
    );
    let asked = ok(
        d,
        &[
            "--config", c, "ask", "--data", "data", "--params", "lm.ckpt", "--memory", "mem.bin", "--questions",
            "data/one_hop_test.jsonl",
        ],
    );
    let row: Value = serde_json::from_str(asked.lines().next().unwrap()).unwrap();
    let lambda = row["lambda"][0].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&lambda));

    let stats: Value = serde_json::from_str(&ok(d, &["memory", "stats", "--memory", "mem.bin"])).unwrap();
    let injected = ok(
        d,
        &[
            "--config", c, "memory", "inject", "--data", "data", "--params", "pre.ckpt", "--memory", "mem.bin",
            "--passages", "data/late_passages.jsonl", "--out", "grown.bin",
        ],
    );
    let v: Value = serde_json::from_str(injected.trim()).unwrap();
    assert_eq!(v["before"], stats);
    let grown: Value = serde_json::from_str(&ok(d, &["memory", "stats", "--memory", "grown.bin"])).unwrap();
    assert_eq!(grown, v["after"]);

    let dump = ok(d, &["memory", "dump", "--memory", "mem.bin", "--data", "data"]);
    let first: Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    assert!(first["topic"].is_string() && first.get("key").is_none());
}

#[test]
fn unknown_holdout_relation_is_a_usage_error() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    pipeline(d, &cfg);
    let out = vkb(
        d,
        &[
            "--config", c, "eval", "--data", "data", "--params", "ft.ckpt", "--memory", "ft-mem.bin", "--questions",
            "data/one_hop_test.jsonl", "--kb", "data/kb.jsonl", "--holdout", "no_such_relation",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}
