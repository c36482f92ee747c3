use std::io::Write;

use rayon::prelude::*;

use super::train::{train, Objective, TrainConfig};
use crate::benchdata::Dataset;
use crate::error::{Error, Result};
use crate::exitpolicy::{ExitPolicy, TraceSet};
use crate::model::{LambdaArch, LambdaInput, ModelConfig};
use crate::stats;

pub const ABLATION_ROWS: [&str; 8] = [
    "vanilla",
    "ponder_sampling",
    "ponder_expectation",
    "q_exit",
    "q_exit+lambda_lr",
    "q_exit+lambda_lr+3layer",
    "q_exit+lambda_lr+concat",
    "q_exit+lambda_lr+3layer+concat",
];

/// Evaluation repetitions used to measure inference-time randomness.
pub const EVAL_REPEATS: usize = 5;

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: String,
    pub seeds: Vec<u64>,
    /// Test accuracy per seed.
    pub metrics: Vec<f64>,
    /// Per seed, std of the metric over repeated evaluations of the same weights.
    pub eval_repeat_std: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        stats::mean(&self.metrics)
    }

    pub fn std(&self) -> f64 {
        stats::std_dev(&self.metrics)
    }

    pub fn median(&self) -> f64 {
        stats::median(&self.metrics)
    }

    pub fn mean_eval_repeat_std(&self) -> f64 {
        stats::mean(&self.eval_repeat_std)
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config", "mean", "std", "median", "eval_repeat_std", "seeds"])?;
        for r in &self.rows {
            w.write_record([
                r.config.clone(),
                r.mean().to_string(),
                r.std().to_string(),
                r.median().to_string(),
                r.mean_eval_repeat_std().to_string(),
                r.seeds.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Variant {
    objective: Objective,
    arch: LambdaArch,
    input: LambdaInput,
    own_lambda_lr: bool,
    /// (row name, policy) pairs evaluated on this variant's trained model.
    rows: &'static [(&'static str, Policy)],
}

#[derive(Clone, Copy)]
enum Policy {
    Fixed,
    Sample,
    Expectation,
    QExit,
}

const VARIANTS: [Variant; 6] = [
    Variant {
        objective: Objective::Vanilla,
        arch: LambdaArch::OneLayer,
        input: LambdaInput::SingleH,
        own_lambda_lr: false,
        rows: &[("vanilla", Policy::Fixed)],
    },
    Variant {
        objective: Objective::Ponder,
        arch: LambdaArch::OneLayer,
        input: LambdaInput::SingleH,
        own_lambda_lr: false,
        rows: &[
            ("ponder_sampling", Policy::Sample),
            ("ponder_expectation", Policy::Expectation),
            ("q_exit", Policy::QExit),
        ],
    },
    Variant {
        objective: Objective::Ponder,
        arch: LambdaArch::OneLayer,
        input: LambdaInput::SingleH,
        own_lambda_lr: true,
        rows: &[("q_exit+lambda_lr", Policy::QExit)],
    },
    Variant {
        objective: Objective::Ponder,
        arch: LambdaArch::ThreeLayer,
        input: LambdaInput::SingleH,
        own_lambda_lr: true,
        rows: &[("q_exit+lambda_lr+3layer", Policy::QExit)],
    },
    Variant {
        objective: Objective::Ponder,
        arch: LambdaArch::OneLayer,
        input: LambdaInput::ConcatHPrev,
        own_lambda_lr: true,
        rows: &[("q_exit+lambda_lr+concat", Policy::QExit)],
    },
    Variant {
        objective: Objective::Ponder,
        arch: LambdaArch::ThreeLayer,
        input: LambdaInput::ConcatHPrev,
        own_lambda_lr: true,
        rows: &[("q_exit+lambda_lr+3layer+concat", Policy::QExit)],
    },
];

/// Trains the six model variants under each seed and evaluates the eight
/// table rows on the test split. Sampling, expectation and plain Q-exit
/// share the baseline model of each seed. Without a separate halting-head
/// rate, the head trains at `base.learning_rate`.
pub fn run_ablation(model: &ModelConfig, base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    if data.test.is_empty() {
        return Err(Error::input("ablation evaluates on the test split, which is empty"));
    }
    let jobs: Vec<(usize, u64)> = (0..VARIANTS.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(v, seed)| -> Result<Vec<(f64, f64)>> {
            let var = &VARIANTS[v];
            let mcfg = ModelConfig {
                lambda_arch: var.arch,
                lambda_input: var.input,
                ..model.clone()
            };
            let tcfg = TrainConfig {
                seed,
                objective: var.objective,
                lambda_learning_rate: if var.own_lambda_lr {
                    base.lambda_learning_rate
                } else {
                    base.learning_rate
                },
                validation_policy: None,
                ..base.clone()
            };
            let report = train(&mcfg, &tcfg, &data.train, &data.dev)?;
            let m = crate::model::PonderModel::new(report.model.clone())?;
            let traces = TraceSet::compute(&m, &report.params, &data.test)?;
            let n = m.depth();
            var.rows
                .iter()
                .map(|&(_, p)| {
                    let policy_for = |r: usize| match p {
                        Policy::Fixed => ExitPolicy::Fixed(n),
                        Policy::Sample => ExitPolicy::Sample(seed.wrapping_mul(1000).wrapping_add(r as u64)),
                        Policy::Expectation => ExitPolicy::Expectation,
                        Policy::QExit => ExitPolicy::QExit(0.5),
                    };
                    let accs = (0..EVAL_REPEATS)
                        .map(|r| traces.evaluate(policy_for(r)).map(|s| s.accuracy()))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((accs[0], stats::std_dev(&accs)))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: Vec<AblationRow> = Vec::new();
    for name in ABLATION_ROWS {
        let (v, k) = VARIANTS
            .iter()
            .enumerate()
            .find_map(|(v, var)| var.rows.iter().position(|(n, _)| *n == name).map(|k| (v, k)))
            .expect("every row belongs to a variant");
        let mut row = AblationRow {
            config: name.to_string(),
            seeds: seeds.to_vec(),
            metrics: Vec::new(),
            eval_repeat_std: Vec::new(),
        };
        for (s, _) in seeds.iter().enumerate() {
            let (acc, rep) = results[v * seeds.len() + s][k];
            row.metrics.push(acc);
            row.eval_repeat_std.push(rep);
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}
