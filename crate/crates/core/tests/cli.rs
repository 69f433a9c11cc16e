//! Runs the `diva` binary end to end on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": { "n_train_classes": 6, "n_test_classes": 4, "samples_per_class": 8, "feature_dim": 8, "mixing_width": 16 },
  "train": {
    "model": { "encoder": { "input_dim": 8, "hidden_dims": [16], "feature_dim": 12 }, "embed_dim": 6 },
    "batch": { "n_classes": 3, "m_per_class": 3 },
    "epochs": 2,
    "lr": 0.001,
    "queue_capacity": 32,
    "eval_every": 1,
    "loss": { "rho_dec": 1.0 }
  }
}"#;

fn diva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diva")).args(args).env("DIVA_THREADS", "1").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        let f = Fixture { dir };
        let o = diva(&["gen-data", "--config", &f.s("tiny.json"), "--out", &f.s("data.bin")]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (config, data, out) = (self.s("tiny.json"), self.s("data.bin"), self.s(out));
        let mut args = vec!["train", "--config", &config, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        diva(&args)
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_defaults_and_seeding() {
    let dir = TempDir::new().unwrap();
    let out = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let o = diva(&["gen-data", "--out", &out("a.bin")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote 1200 samples"));
    assert_eq!(code(&diva(&["gen-data", "--out", &out("b.bin")])), 0);
    assert_eq!(fs::read(out("a.bin")).unwrap(), fs::read(out("b.bin")).unwrap());
    assert_eq!(code(&diva(&["gen-data", "--out", &out("c.bin"), "--seed", "1"])), 0);
    assert_ne!(fs::read(out("a.bin")).unwrap(), fs::read(out("c.bin")).unwrap());
    assert_eq!(code(&diva(&["gen-data", "--out", &out("a.csv")])), 0);
    let csv = fs::read_to_string(out("a.csv")).unwrap();
    // Headerless: 64 features, the label, then the split flag.
    assert_eq!(csv.lines().count(), 1200);
    assert!(csv.lines().all(|l| l.split(',').count() == 66));
}

#[test]
fn train_writes_artifacts_and_progress() {
    let f = Fixture::new();
    let o = f.train("run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["config.json", "checkpoint.bin", "history.json", "report.json"] {
        assert!(f.p("run").join(name).exists(), "{name}");
    }
    // Default task set is all four.
    let cfg = read_json(&f.p("run/config.json"));
    assert_eq!(cfg["model"]["tasks"].as_array().unwrap().len(), 4);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let line = stdout.lines().next().expect("progress line");
    assert_eq!(line.split_whitespace().count(), 8, "{line}");

    let report = read_json(&f.p("run/report.json"));
    let ens = &report["ensemble"];
    for k in ["recall@1", "recall@2", "recall@4", "recall@8"] {
        let r = ens["recall"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r), "{k}");
    }
    assert!(ens["nmi"].as_f64().is_some());
    assert!(ens["spectral_decay"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["heads"].as_object().unwrap().len(), 4);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("a", &["--quiet"])), 0);
    assert_eq!(code(&f.train("b", &["--quiet"])), 0);
    assert_eq!(fs::read(f.p("a/checkpoint.bin")).unwrap(), fs::read(f.p("b/checkpoint.bin")).unwrap());
    assert_eq!(fs::read(f.p("a/history.json")).unwrap(), fs::read(f.p("b/history.json")).unwrap());

    assert_eq!(code(&f.train("part", &["--quiet", "--epochs", "1"])), 0);
    let o = diva(&[
        "train", "--resume", &f.s("part/checkpoint.bin"), "--epochs", "2", "--data", &f.s("data.bin"), "--out", &f.s("resumed"),
        "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (a, r) = (read_json(&f.p("a/report.json")), read_json(&f.p("resumed/report.json")));
    assert_eq!(a, r);
}

#[test]
fn eval_is_deterministic() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &["--quiet", "--tasks", "D,Da"])), 0);
    for out in ["e1.json", "e2.json"] {
        let o = diva(&["eval", "--checkpoint", &f.s("run/checkpoint.bin"), "--data", &f.s("data.bin"), "--out", &f.s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(f.p("e1.json")).unwrap(), fs::read(f.p("e2.json")).unwrap());
    assert_eq!(read_json(&f.p("e1.json"))["heads"].as_object().unwrap().len(), 2);
}

#[test]
fn spectrum_outputs_are_normalized() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("full", &["--quiet"])), 0);
    assert_eq!(code(&f.train("base", &["--quiet", "--tasks", "D"])), 0);
    let o = diva(&[
        "spectrum", "--checkpoint", &f.s("full/checkpoint.bin"), "--baseline", &f.s("base/checkpoint.bin"), "--data",
        &f.s("data.bin"), "--out", &f.s("spec"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["spec.csv", "spec.baseline.csv"] {
        let mut rdr = csv::Reader::from_path(f.p(name)).unwrap();
        let total: f64 = rdr.records().map(|r| r.unwrap()[1].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{name}: {total}");
    }
    assert!(fs::read_to_string(f.p("spec.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn ablate_writes_tables() {
    let f = Fixture::new();
    let o = diva(&["ablate", "--config", &f.s("tiny.json"), "--data", &f.s("data.bin"), "--out", &f.s("abl"), "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(f.p("abl/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 12);
    assert!(summary.lines().next().unwrap().starts_with("cell,"));
    assert_eq!(fs::read_to_string(f.p("abl/runs.csv")).unwrap().lines().count(), 12);
    assert!(f.p("abl/ablation.json").exists());
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    // Configuration errors name their position.
    fs::write(f.p("bad.json"), "{\n  \"train\": {\n    \"epochs\": 2,\n  }\n}").unwrap();
    let o = f.train("x", &[]);
    assert_eq!(code(&o), 0);
    let o = diva(&["train", "--config", &f.s("bad.json"), "--data", &f.s("data.bin"), "--out", &f.s("x")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    assert_eq!(code(&f.train("x", &["--tasks", "S,I"])), 2);
    assert_eq!(code(&diva(&["train", "--bogus"])), 2);

    // Missing and malformed files.
    assert_eq!(code(&diva(&["eval", "--checkpoint", &f.s("nope.bin"), "--data", &f.s("data.bin"), "--out", &f.s("r.json")])), 3);
    fs::write(f.p("junk.bin"), b"not a checkpoint").unwrap();
    assert_eq!(code(&diva(&["eval", "--checkpoint", &f.s("junk.bin"), "--data", &f.s("data.bin"), "--out", &f.s("r.json")])), 3);

    // Feature width mismatch between checkpoint and data.
    fs::write(f.p("wide.json"), r#"{"data": {"n_train_classes": 6, "n_test_classes": 4, "samples_per_class": 8, "feature_dim": 10}}"#).unwrap();
    assert_eq!(code(&diva(&["gen-data", "--config", &f.s("wide.json"), "--out", &f.s("wide.bin")])), 0);
    assert_eq!(code(&diva(&["eval", "--checkpoint", &f.s("x/checkpoint.bin"), "--data", &f.s("wide.bin"), "--out", &f.s("r.json")])), 5);

    // Divergence keeps the last checkpoint and history.
    let huge = TINY.replace("\"lr\": 0.001", "\"lr\": 1e300");
    fs::write(f.p("huge.json"), huge).unwrap();
    let o = diva(&["train", "--config", &f.s("huge.json"), "--data", &f.s("data.bin"), "--out", &f.s("div"), "--quiet"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(f.p("div/checkpoint.bin").exists() && f.p("div/history.json").exists());

    // Bad thread setting.
    let o = Command::new(env!("CARGO_BIN_EXE_diva"))
        .args(["ablate", "--config", &f.s("tiny.json"), "--data", &f.s("data.bin"), "--out", &f.s("abl"), "--seeds", "1"])
        .env("DIVA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
