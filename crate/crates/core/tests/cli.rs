use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ponder_core::benchdata::{Dataset, SplitSizes, Task, TaskSpec};
use ponder_core::harness::{read_outcomes_csv, RunConfig, RunManifest};
use ponder_core::model::{Checkpoint, ClassifierMode, ModelConfig, PonderModel};
use ponder_core::training::{Objective, TrainConfig};

fn config(objective: Objective, mode: ClassifierMode) -> RunConfig {
    RunConfig {
        task: TaskSpec {
            task: Task::NoisyMajority,
            vocab_size: 8,
            seq_len: 6,
            num_classes: 2,
            difficulty_levels: 2,
            examples_per_split: SplitSizes {
                train: 48,
                dev: 16,
                test: 24,
            },
            seed: 4,
        },
        model: ModelConfig {
            vocab_size: 8,
            max_seq_len: 6,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_layers: 4,
            num_classes: 2,
            classifier_mode: mode,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            learning_rate: 1e-2,
            lambda_learning_rate: 1e-2,
            batch_size: 8,
            max_epochs: 3,
            objective,
            ..TrainConfig::default()
        },
        seeds: vec![0],
        q_values: vec![0.05, 0.25, 0.5, 0.75, 0.95],
        patience_values: vec![1, 2, 3],
        ..RunConfig::default()
    }
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(cfg: &RunConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), serde_json::to_string(cfg).unwrap()).unwrap();
        let ws = Self { dir };
        ws.ok(&["gen-data", "--out", &ws.s("gen")]);
        ws
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        all.extend(["--config".into(), self.s("config.json"), "--data".into(), self.s("gen/data")]);
        if args[0] == "gen-data" {
            all.truncate(all.len() - 2);
        }
        Command::new(env!("CARGO_BIN_EXE_ponder")).args(&all).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn train(&self, out: &str, seed: &str) -> String {
        self.ok(&["train", "--out", &self.s(out), "--seed", seed]);
        self.s(&format!("{out}/checkpoint.json"))
    }
}

fn summary(path: &Path) -> Vec<(String, String)> {
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    lines[0]
        .split(',')
        .zip(lines[1].split(','))
        .map(|(h, v)| (h.to_string(), v.to_string()))
        .collect()
}

fn field(rows: &[(String, String)], name: &str) -> String {
    rows.iter().find(|(h, _)| h == name).unwrap().1.clone()
}

#[test]
fn train_then_eval_is_deterministic() {
    let cfg = config(Objective::Ponder, ClassifierMode::Shared);
    let ws = Workspace::new(&cfg);
    let ck = ws.train("t", "0");
    assert!(ws.p("t/epochs.csv").exists());

    let eval = |out: &str, policy: &str| {
        ws.ok(&["eval", "--checkpoint", &ck, "--policy", policy, "--out", &ws.s(out)]);
        (fs::read(ws.p(&format!("{out}/outcomes.csv"))).unwrap(), fs::read(ws.p(&format!("{out}/summary.csv"))).unwrap())
    };
    let a = eval("e1", "q_exit:0.5");
    let b = eval("e2", "q_exit:0.5");
    assert_eq!(a, b);

    let rows = read_outcomes_csv(&a.0[..]).unwrap();
    assert_eq!(rows.len(), 24);
    let s = summary(&ws.p("e1/summary.csv"));
    let mean = rows.iter().map(|r| r.layers_evaluated).sum::<usize>() as f64 / 24.0;
    assert_eq!(field(&s, "mean_exit_depth").parse::<f64>().unwrap(), mean);
    assert_eq!(field(&s, "speedup").parse::<f64>().unwrap(), 4.0 / mean);

    eval("e3", "expectation");
    let s = summary(&ws.p("e3/summary.csv"));
    assert_eq!(field(&s, "speedup"), "1");
    assert_eq!(field(&s, "non_early_exit"), "true");

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(ws.p("e1/eval.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_sha256, cfg.hash().unwrap());
    assert_eq!(manifest.crate_version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn vanilla_full_depth_matches_last_layer_accuracy() {
    let ws = Workspace::new(&config(Objective::Vanilla, ClassifierMode::Shared));
    let ck = ws.train("v", "1");
    ws.ok(&["eval", "--checkpoint", &ck, "--policy", "fixed:4", "--out", &ws.s("e")]);
    let s = summary(&ws.p("e/summary.csv"));
    assert_eq!(field(&s, "speedup"), "1");

    let loaded = Checkpoint::load(Path::new(&ck)).unwrap();
    let m = PonderModel::new(loaded.model).unwrap();
    let data = Dataset::load(&ws.p("gen/data")).unwrap();
    let correct = data
        .test
        .iter()
        .filter(|ex| m.forward_full(&loaded.params, &ex.tokens).unwrap().layers[3].prediction() == ex.label)
        .count();
    assert_eq!(field(&s, "metric").parse::<f64>().unwrap(), correct as f64 / 24.0);
}

#[test]
fn sweeps_and_speed_tables() {
    let ws = Workspace::new(&config(Objective::Ponder, ClassifierMode::Shared));
    let a = ws.train("a", "0");
    let b = ws.train("b", "1");
    ws.ok(&["sweep-q", "--checkpoint", &a, "--checkpoint", &b, "--out", &ws.s("sq")]);
    let text = fs::read_to_string(ws.p("sq/sweep_q.csv")).unwrap();
    let depths: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(depths.len(), 5);
    assert!(depths.windows(2).all(|w| w[0] <= w[1]));

    let pabee_ws = {
        let cfg = config(Objective::Pabee, ClassifierMode::PerLayer);
        fs::write(ws.p("pabee.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_ponder"))
            .args(["train", "--config", &ws.s("pabee.json"), "--data", &ws.s("gen/data"), "--out", &ws.s("p")])
            .output()
            .unwrap();
        assert!(out.status.success());
        ws.s("p/checkpoint.json")
    };
    ws.ok(&["speed", "--checkpoint", &a, "--pabee-checkpoint", &pabee_ws, "--out", &ws.s("sp")]);
    let text = fs::read_to_string(ws.p("sp/speed.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "family,policy,parameter,mean_exit_depth,speedup,metric_mean,metric_std");
    // Anchor plus five q rows, anchor plus three patience rows.
    assert_eq!(lines.len(), 1 + 6 + 4);
    assert!(lines[1].starts_with("ponder,fixed,4,4,1,"));
    assert!(lines[7].starts_with("pabee,fixed,4,4,1,"));
}

fn error_of(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

#[test]
fn failures_emit_one_json_error_line() {
    let ws = Workspace::new(&config(Objective::Ponder, ClassifierMode::Shared));

    let out = ws.run(&["eval", "--checkpoint", &ws.s("missing.json"), "--out", &ws.s("x")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"], "io");

    let out = ws.run(&["eval", "--checkpoint", &ws.s("missing.json"), "--policy", "q_exit:2"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"], "usage");

    fs::write(ws.p("bad.json"), r#"{"unknown_block": {}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ponder"))
        .args(["gen-data", "--config", &ws.s("bad.json"), "--out", &ws.s("y")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["error"], "json");

    let mut cfg = config(Objective::Ponder, ClassifierMode::Shared);
    cfg.model.num_classes = 3;
    fs::write(ws.p("mismatch.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ponder"))
        .args(["gen-data", "--config", &ws.s("mismatch.json"), "--out", &ws.s("z")])
        .output()
        .unwrap();
    assert_eq!(error_of(&out)["error"], "config");

    fs::write(ws.p("gen/data/dev.tsv"), "0\t1\tnot-a-number\n").unwrap();
    let out = ws.run(&["train", "--out", &ws.s("t")]);
    let err = error_of(&out);
    assert_eq!(err["error"], "malformed_record");
    assert!(err["message"].as_str().unwrap().contains("dev.tsv"));
}

#[test]
fn shipped_pattern_depth_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pattern_depth.json");
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.task.task, Task::PatternDepth);
    assert_eq!((cfg.task.seq_len, cfg.task.vocab_size, cfg.task.difficulty_levels), (9, 11, 4));
    let model = ModelConfig {
        vocab_size: 11,
        max_seq_len: 9,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_layers: 12,
        num_classes: 2,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.model, model);
    assert_eq!(cfg.train.lambda_prior, 0.1);
    assert_eq!(cfg.seeds, [0, 1, 2, 3, 4]);
}
