use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmtitlegen::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use mmtitlegen::corpus::{load_corpus, load_generated, save_generated, GENERATED_KEY};
use mmtitlegen::trainer::TrainConfig;

fn mm(args: &[&str]) -> i32 {
    let mut v = vec!["mmtitlegen"];
    v.extend_from_slice(args);
    run(v)
}

fn bin(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmtitlegen"));
    cmd.args(args).env_remove("MMTITLEGEN_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn small_config(train_steps: usize) -> serde_json::Value {
    serde_json::json!({
        "lr": 0.01, "pretrain_steps": 6, "d_pretrain_steps": 3, "train_steps": train_steps,
        "batch_g": 4, "batch_d": 8, "n_rollouts": 2, "min_frequency": 1,
        "embed_dim": 6, "title_hidden": 8, "title_layers": 1, "attr_hidden": 6, "fusion_dim": 8,
        "decoder_hidden": 8, "decoder_layers": 1, "disc_embed_dim": 6, "disc_hidden": 8,
        "max_decode_len": 7, "reward_baseline": "running_mean", "checkpoint_every": 1, "seed": 3
    })
}

/// Synthesises a corpus and trains a small model on it.
fn trained(dir: &Dir) -> (String, String) {
    let corpus = dir.s("corpus.jsonl");
    assert_eq!(mm(&["synth", "--n", "20", "--seed", "1", "--out", &corpus]), EXIT_OK);
    fs::write(dir.path("config.json"), small_config(2).to_string()).unwrap();
    let code = mm(&["train", "--config", &dir.s("config.json"), "--corpus", &corpus, "--out", &dir.s("run")]);
    assert_eq!(code, EXIT_OK);
    (corpus, dir.path("run").join("checkpoint.json").to_str().unwrap().to_string())
}

#[test]
fn synth_is_deterministic_and_writes_n_records() {
    let dir = Dir::new();
    for name in ["a.jsonl", "b.jsonl"] {
        assert_eq!(mm(&["synth", "--n", "25", "--seed", "7", "--out", &dir.s(name)]), EXIT_OK);
    }
    let a = fs::read_to_string(dir.path("a.jsonl")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path("b.jsonl")).unwrap());
    assert_eq!(a.lines().count(), 25);
    assert_eq!(load_corpus(&dir.path("a.jsonl")).unwrap().len(), 25);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);

    assert_eq!(mm(&["synth", "--n", "25", "--seed", "8", "--out", &dir.s("c.jsonl")]), EXIT_OK);
    assert_ne!(a, fs::read_to_string(dir.path("c.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    let dir = Dir::new();
    assert_eq!(mm(&["synth", "--n", "0", "--out", &dir.s("x.jsonl")]), EXIT_USAGE);
    assert_eq!(mm(&["synth", "--out", &dir.s("x.jsonl")]), EXIT_USAGE);
    assert_eq!(mm(&["frobnicate"]), EXIT_USAGE);
    assert!(!dir.path("x.jsonl").exists());
}

#[test]
fn seed_is_read_from_environment() {
    let dir = Dir::new();
    let env = bin(&["synth", "--n", "5", "--out", &dir.s("env.jsonl")], &[("MMTITLEGEN_SEED", "13")]);
    assert!(env.status.success());
    let flag = bin(&["synth", "--n", "5", "--seed", "13", "--out", &dir.s("flag.jsonl")], &[]);
    assert!(flag.status.success());
    let other = bin(&["synth", "--n", "5", "--out", &dir.s("default.jsonl")], &[]);
    assert!(other.status.success());
    let read = |n: &str| fs::read(dir.path(n)).unwrap();
    assert_eq!(read("env.jsonl"), read("flag.jsonl"));
    assert_ne!(read("env.jsonl"), read("default.jsonl"));
}

#[test]
fn default_config_uses_published_hyperparameters() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr, 1e-3);
    assert_eq!(cfg.n_rollouts, 7);
    assert_eq!((cfg.batch_g, cfg.batch_d), (256, 512));
    assert_eq!((cfg.d_steps, cfg.g_steps), (1, 1));
    assert_eq!(TrainConfig::from_json_str("{}").unwrap(), cfg);
}

#[test]
fn train_rejects_missing_inputs_and_bad_configs() {
    let dir = Dir::new();
    let corpus = dir.s("corpus.jsonl");
    assert_eq!(mm(&["synth", "--n", "5", "--out", &corpus]), EXIT_OK);
    let missing = mm(&["train", "--corpus", &dir.s("nope.jsonl"), "--out", &dir.s("run")]);
    assert_eq!(missing, EXIT_DATA);

    let mut cfg = small_config(1);
    cfg["learning_rate"] = serde_json::json!(0.1);
    fs::write(dir.path("bad.json"), cfg.to_string()).unwrap();
    let out = bin(&["train", "--config", &dir.s("bad.json"), "--corpus", &corpus, "--out", &dir.s("run")], &[]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(dir.path("neg.json"), r#"{"lr": -1.0}"#).unwrap();
    let code = mm(&["train", "--config", &dir.s("neg.json"), "--corpus", &corpus, "--out", &dir.s("run")]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn train_writes_checkpoint_metrics_and_manifest() {
    let dir = Dir::new();
    trained(&dir);
    let run = dir.path("run");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, m) in lines.iter().enumerate() {
        assert_eq!(m["iter"], i + 1);
        assert!(m["wallclock_s"].is_null());
        for key in ["mean_reward", "d_loss", "g_mle_loss"] {
            assert!(m[key].as_f64().unwrap().is_finite(), "{key}");
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 3);
    assert!(run.join("vocab.txt").is_file());
}

#[test]
fn resume_continues_exactly_where_training_stopped() {
    let dir = Dir::new();
    let corpus = dir.s("corpus.jsonl");
    assert_eq!(mm(&["synth", "--n", "20", "--seed", "1", "--out", &corpus]), EXIT_OK);
    fs::write(dir.path("two.json"), small_config(2).to_string()).unwrap();
    fs::write(dir.path("four.json"), small_config(4).to_string()).unwrap();

    let straight = dir.s("straight");
    assert_eq!(mm(&["train", "--config", &dir.s("four.json"), "--corpus", &corpus, "--out", &straight]), EXIT_OK);

    let split = dir.s("split");
    assert_eq!(mm(&["train", "--config", &dir.s("two.json"), "--corpus", &corpus, "--out", &split]), EXIT_OK);
    let ckpt = Path::new(&split).join("checkpoint.json");
    let code = mm(&[
        "train", "--config", &dir.s("four.json"), "--corpus", &corpus, "--out", &split,
        "--resume", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);

    for file in ["metrics.jsonl", "checkpoint.json"] {
        let a = fs::read(Path::new(&straight).join(file)).unwrap();
        let b = fs::read(Path::new(&split).join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
}

#[test]
fn resume_with_mismatched_shapes_fails() {
    let dir = Dir::new();
    let (corpus, ckpt) = trained(&dir);
    let mut cfg = small_config(3);
    cfg["fusion_dim"] = serde_json::json!(5);
    fs::write(dir.path("wider.json"), cfg.to_string()).unwrap();
    let out = bin(
        &["train", "--config", &dir.s("wider.json"), "--corpus", &corpus, "--out", &dir.s("run2"), "--resume", &ckpt],
        &[],
    );
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));
}

#[test]
fn generate_greedy_ignores_seed_and_sampling_is_reproducible() {
    let dir = Dir::new();
    let (corpus, ckpt) = trained(&dir);
    let corpus_before = fs::read(&corpus).unwrap();
    let ckpt_before = fs::read(&ckpt).unwrap();
    let gen = |mode: &str, seed: &str, out: &str| {
        let code = mm(&[
            "generate", "--checkpoint", &ckpt, "--in", &corpus, "--out", &dir.s(out), "--mode", mode, "--seed", seed,
        ]);
        assert_eq!(code, EXIT_OK);
        fs::read_to_string(dir.path(out)).unwrap()
    };
    assert_eq!(gen("greedy", "1", "g1.jsonl"), gen("greedy", "2", "g2.jsonl"));
    let s1 = gen("sample", "5", "s1.jsonl");
    assert_eq!(s1, gen("sample", "5", "s2.jsonl"));
    assert_ne!(s1, gen("sample", "6", "s3.jsonl"));

    let rows = load_generated(&dir.path("s1.jsonl")).unwrap();
    assert_eq!(rows.len(), 20);
    for (_, title) in rows {
        assert!(title.unwrap().len() <= 7);
    }
    assert!(s1.contains(GENERATED_KEY));
    assert!(dir.path("s1.jsonl.manifest.json").is_file());
    assert_eq!(fs::read(&corpus).unwrap(), corpus_before);
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_before);
}

#[test]
fn evaluate_scores_stored_titles_and_checkpoints() {
    let dir = Dir::new();
    let (corpus, ckpt) = trained(&dir);
    let records = load_corpus(Path::new(&corpus)).unwrap();
    let rows: Vec<_> = records.iter().map(|r| (r.clone(), r.short_title.clone().unwrap())).collect();
    save_generated(&rows, &dir.path("gold.jsonl")).unwrap();

    let code = mm(&["evaluate", "--test", &dir.s("gold.jsonl"), "--out", &dir.s("gold.json"), "--per-record"]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path("gold.json")).unwrap()).unwrap();
    for key in ["rouge1", "rouge2", "rougeL"] {
        assert_eq!(report[key], 100.0, "{key}");
    }
    assert_eq!(report["count"], 20);
    assert_eq!(report["per_pair"].as_array().unwrap().len(), 20);

    let code = mm(&["evaluate", "--checkpoint", &ckpt, "--test", &corpus, "--out", &dir.s("model.json")]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path("model.json")).unwrap()).unwrap();
    let r1 = report["rouge1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&r1));

    // Records without stored titles need a checkpoint.
    let code = mm(&["evaluate", "--test", &corpus, "--out", &dir.s("none.json")]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn abmetrics_pools_counts() {
    let dir = Dir::new();
    fs::write(dir.path("one.csv"), "product_id,pv,clicks,trades\np1,200,10,1\n").unwrap();
    assert_eq!(mm(&["abmetrics", "--log", &dir.s("one.csv"), "--out", &dir.s("one.json")]), EXIT_OK);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path("one.json")).unwrap()).unwrap();
    assert_eq!(m["ctr"], 0.05);
    assert_eq!(m["cvr"], 0.1);

    fs::write(dir.path("log.csv"), "product_id,pv,clicks,trades\np1,100,4,1\np2,100,6,0\n").unwrap();
    assert_eq!(mm(&["abmetrics", "--log", &dir.s("log.csv"), "--out", &dir.s("ab.json")]), EXIT_OK);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path("ab.json")).unwrap()).unwrap();
    assert_eq!(m["ctr"], 0.05);
    assert_eq!(m["cvr"], 0.1);
    assert_eq!(m["pv"], 200);
    assert!(dir.path("ab.json.manifest.json").is_file());

    fs::write(dir.path("zero.csv"), "product_id,pv,clicks,trades\np1,0,0,0\n").unwrap();
    assert_eq!(mm(&["abmetrics", "--log", &dir.s("zero.csv"), "--out", &dir.s("z.json")]), EXIT_OK);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path("z.json")).unwrap()).unwrap();
    assert!(m["ctr"].is_null() && m["cvr"].is_null());
}

#[test]
fn abmetrics_reports_the_bad_line() {
    let dir = Dir::new();
    fs::write(dir.path("bad.csv"), "product_id,pv,clicks,trades\np1,10,1,0\np2,ten,1,0\n").unwrap();
    let out = bin(&["abmetrics", "--log", &dir.s("bad.csv"), "--out", &dir.s("ab.json")], &[]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(dir.path("hdr.csv"), "id,views,clicks,trades\n").unwrap();
    assert_eq!(mm(&["abmetrics", "--log", &dir.s("hdr.csv"), "--out", &dir.s("ab.json")]), EXIT_DATA);
    assert_eq!(mm(&["abmetrics", "--log", &dir.s("missing.csv"), "--out", &dir.s("ab.json")]), EXIT_DATA);
}
