//! Experiment drivers behind the `ponder` binary: run configs, evaluation
//! reports, sweeps, and the CSV and manifest files they write.

mod commands;
mod sweep;

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchdata::{generate, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::exitpolicy::{EvalSummary, ExampleOutcome};
use crate::model::{ModelConfig, CHECKPOINT_VERSION};
use crate::training::{HyperGrid, TrainConfig};

pub use commands::{
    cmd_ablation, cmd_eval, cmd_gen_data, cmd_grid_search, cmd_speed, cmd_sweep_prior, cmd_sweep_q, cmd_train,
    CommandOutput, Common,
};
pub use sweep::{
    speed_table, sweep_prior, sweep_q, write_speed_csv, write_sweep_csv, PriorRow, PriorSweep, SpeedFamily, SpeedRow,
    SweepAxis, SweepRow, SweepSpec,
};

pub const OUTCOME_CSV_HEADER: [&str; 7] = [
    "example_id",
    "difficulty",
    "exit_layer",
    "layers_evaluated",
    "prediction",
    "label",
    "correct",
];

/// Everything a command needs besides its own flags. Every block may be
/// omitted from the JSON file and then takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Seeds for multi-seed commands.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_q_values")]
    pub q_values: Vec<f64>,
    #[serde(default = "default_lambda_priors")]
    pub lambda_priors: Vec<f64>,
    #[serde(default = "default_patience_values")]
    pub patience_values: Vec<usize>,
    #[serde(default = "default_grid")]
    pub grid: HyperGrid,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_q_values() -> Vec<f64> {
    vec![0.05, 0.25, 0.5, 0.75, 0.95]
}

fn default_lambda_priors() -> Vec<f64> {
    vec![0.1, 0.15, 0.25, 0.5]
}

fn default_patience_values() -> Vec<usize> {
    (1..=11).collect()
}

fn default_grid() -> HyperGrid {
    HyperGrid {
        learning_rates: vec![1e-5, 2e-5, 3e-5, 5e-5],
        batch_sizes: vec![16, 32, 128],
        lambda_learning_rates: vec![1e-5, 2e-5, 3e-5],
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            q_values: default_q_values(),
            lambda_priors: default_lambda_priors(),
            patience_values: default_patience_values(),
            grid: default_grid(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if m.vocab_size < self.task.vocab_size || m.max_seq_len < self.task.seq_len {
            return Err(Error::config(format!(
                "model (vocab {}, seq {}) is smaller than the task (vocab {}, seq {})",
                m.vocab_size, m.max_seq_len, self.task.vocab_size, self.task.seq_len
            )));
        }
        if m.num_classes != self.task.num_classes {
            return Err(Error::config(format!(
                "model has {} classes, task has {}",
                m.num_classes, self.task.num_classes
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// The dataset stored under `dir`, or a fresh one from `task`.
    pub fn dataset(&self, dir: Option<&Path>) -> Result<Dataset> {
        match dir {
            Some(d) => Dataset::load(d),
            None => generate(&self.task),
        }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub crate_version: String,
    pub checkpoint_version: u32,
    pub threads: usize,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_sha256: config.hash()?,
            seed: config.train.seed,
            seeds: config.seeds.clone(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_version: CHECKPOINT_VERSION,
            threads: rayon::current_num_threads(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        })
    }
}

pub fn write_outcomes_csv<W: Write>(out: W, outcomes: &[ExampleOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OUTCOME_CSV_HEADER)?;
    for o in outcomes {
        w.write_record([
            o.example_id.to_string(),
            o.difficulty.to_string(),
            o.exit_layer.to_string(),
            o.layers_evaluated.to_string(),
            o.prediction.to_string(),
            o.label.to_string(),
            (o.correct as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_outcomes_csv<R: Read>(input: R) -> Result<Vec<ExampleOutcome>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(OUTCOME_CSV_HEADER) {
        return Err(Error::input(format!("unexpected outcome header {:?}", r.headers()?)));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| Error::input(format!("bad `{}` value `{}`", OUTCOME_CSV_HEADER[i], &rec[i])))
        };
        out.push(ExampleOutcome {
            example_id: field(0)?,
            difficulty: field(1)?,
            exit_layer: field(2)?,
            layers_evaluated: field(3)?,
            prediction: field(4)?,
            label: field(5)?,
            correct: field(6)? == 1,
        });
    }
    Ok(out)
}

/// One evaluation summarized for the summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub split: String,
    pub examples: usize,
    pub metric: f64,
    pub mean_exit_depth: f64,
    pub speedup: f64,
    pub non_early_exit: bool,
}

impl SummaryRow {
    pub fn from_summary(s: &EvalSummary, split: &str) -> Self {
        Self {
            policy: s.policy.to_string(),
            split: split.to_string(),
            examples: s.outcomes.len(),
            metric: s.accuracy(),
            mean_exit_depth: s.mean_exit_depth(),
            speedup: s.speedup(),
            non_early_exit: !s.policy.is_early_exit(),
        }
    }
}

pub const SUMMARY_CSV_HEADER: [&str; 7] = [
    "policy",
    "split",
    "examples",
    "metric",
    "mean_exit_depth",
    "speedup",
    "non_early_exit",
];

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.split.clone(),
            r.examples.to_string(),
            r.metric.to_string(),
            r.mean_exit_depth.to_string(),
            r.speedup.to_string(),
            r.non_early_exit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
