use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchdata::Dataset;
use crate::error::{Error, Result};
use crate::exitpolicy::{ExitPolicy, TraceSet};
use crate::model::{ModelConfig, PonderModel};
use crate::stats;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Q,
    LambdaPrior,
    Patience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, values: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        if values.is_empty() || seeds.is_empty() {
            return Err(Error::config("a sweep needs at least one value and one seed"));
        }
        for &v in &values {
            let ok = match axis {
                SweepAxis::Q => v > 0.0 && v <= 1.0,
                SweepAxis::LambdaPrior => v > 0.0 && v < 1.0,
                SweepAxis::Patience => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::config(format!("{v} is not a valid {axis:?} value")));
            }
        }
        Ok(Self { axis, values, seeds })
    }

    fn policy(&self, v: f64) -> ExitPolicy {
        match self.axis {
            SweepAxis::Q => ExitPolicy::QExit(v),
            SweepAxis::Patience => ExitPolicy::Patience(v as usize),
            SweepAxis::LambdaPrior => ExitPolicy::QExit(0.5),
        }
    }
}

/// One sweep value aggregated over models.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub mean_exit_depth: f64,
    pub speedup: f64,
}

fn aggregate(value: f64, depth: usize, traces: &[TraceSet], policy: ExitPolicy) -> Result<SweepRow> {
    let summaries = traces
        .iter()
        .map(|t| t.evaluate(policy))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<f64> = summaries.iter().map(|s| s.accuracy()).collect();
    let depths: Vec<f64> = summaries.iter().map(|s| s.mean_exit_depth()).collect();
    let mean_exit_depth = stats::mean(&depths);
    Ok(SweepRow {
        value,
        metric_mean: stats::mean(&metrics),
        metric_std: stats::std_dev(&metrics),
        mean_exit_depth,
        speedup: depth as f64 / mean_exit_depth,
    })
}

fn check_traces(traces: &[TraceSet]) -> Result<usize> {
    let first = traces
        .first()
        .ok_or_else(|| Error::config("a sweep needs at least one trained model"))?;
    if traces.iter().any(|t| t.depth != first.depth) {
        return Err(Error::config("all models in a sweep must share one depth"));
    }
    Ok(first.depth)
}

/// Evaluates each `q` on every model's traces; one row per `q`, in input order.
pub fn sweep_q(traces: &[TraceSet], q_values: &[f64]) -> Result<Vec<SweepRow>> {
    let depth = check_traces(traces)?;
    let spec = SweepSpec::new(SweepAxis::Q, q_values.to_vec(), vec![0])?;
    spec.values
        .iter()
        .map(|&q| aggregate(q, depth, traces, spec.policy(q)))
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: W, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let name = match axis {
        SweepAxis::Q => "q",
        SweepAxis::LambdaPrior => "lambda_prior",
        SweepAxis::Patience => "patience",
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record([name, "metric_mean", "metric_std", "mean_exit_depth", "speedup"])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.metric_mean.to_string(),
            r.metric_std.to_string(),
            r.mean_exit_depth.to_string(),
            r.speedup.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorRow {
    pub lambda_prior: f64,
    pub seeds: Vec<u64>,
    /// Test accuracy under Q-exit(0.5), per seed.
    pub metrics: Vec<f64>,
    /// Mean exit depth under Q-exit(0.5), per seed.
    pub depths: Vec<f64>,
    /// Exit-layer counts on the test split, per seed.
    pub histograms: Vec<Vec<usize>>,
    /// Analytic exit posterior averaged over the train split and the seeds.
    pub mean_posterior: Vec<f64>,
}

impl PriorRow {
    pub fn mean_depth(&self) -> f64 {
        stats::mean(&self.depths)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSweep {
    pub rows: Vec<PriorRow>,
}

impl PriorSweep {
    pub fn write_metrics<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda_prior", "metric_mean", "metric_std", "mean_exit_depth", "mean_exit_depth_std"])?;
        for r in &self.rows {
            w.write_record([
                r.lambda_prior.to_string(),
                stats::mean(&r.metrics).to_string(),
                stats::std_dev(&r.metrics).to_string(),
                r.mean_depth().to_string(),
                stats::std_dev(&r.depths).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_histograms<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda_prior", "seed", "layer", "count"])?;
        for r in &self.rows {
            for (seed, h) in r.seeds.iter().zip(&r.histograms) {
                for (i, c) in h.iter().enumerate() {
                    w.write_record([r.lambda_prior.to_string(), seed.to_string(), (i + 1).to_string(), c.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_posterior<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda_prior", "layer", "mean_posterior"])?;
        for r in &self.rows {
            for (i, p) in r.mean_posterior.iter().enumerate() {
                w.write_record([r.lambda_prior.to_string(), (i + 1).to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Retrains under every prior and seed, then reports Q-exit(0.5) on the
/// test split and the averaged posterior on the train split.
pub fn sweep_prior(model: &ModelConfig, base: &TrainConfig, data: &Dataset, spec: &SweepSpec) -> Result<PriorSweep> {
    if spec.axis != SweepAxis::LambdaPrior {
        return Err(Error::config("sweep_prior needs a lambda_prior sweep"));
    }
    if data.test.is_empty() || data.train.is_empty() {
        return Err(Error::input("prior sweep needs non-empty train and test splits"));
    }
    let jobs: Vec<(f64, u64)> = spec
        .values
        .iter()
        .flat_map(|&l| spec.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(lambda_prior, seed)| -> Result<(f64, f64, Vec<usize>, Vec<f64>)> {
            let cfg = TrainConfig {
                lambda_prior,
                seed,
                ..base.clone()
            };
            let report = train(model, &cfg, &data.train, &data.dev)?;
            let m = PonderModel::new(report.model.clone())?;
            let test = TraceSet::compute(&m, &report.params, &data.test)?.evaluate(ExitPolicy::QExit(0.5))?;
            let posterior = TraceSet::compute(&m, &report.params, &data.train)?.mean_posterior()?;
            Ok((test.accuracy(), test.mean_exit_depth(), test.exit_histogram(), posterior))
        })
        .collect::<Result<Vec<_>>>()?;

    let k = spec.seeds.len();
    let rows = spec
        .values
        .iter()
        .enumerate()
        .map(|(v, &lambda_prior)| {
            let cell = &results[v * k..(v + 1) * k];
            let n = cell[0].3.len();
            let mean_posterior = (0..n)
                .map(|i| cell.iter().map(|c| c.3[i]).sum::<f64>() / k as f64)
                .collect();
            PriorRow {
                lambda_prior,
                seeds: spec.seeds.clone(),
                metrics: cell.iter().map(|c| c.0).collect(),
                depths: cell.iter().map(|c| c.1).collect(),
                histograms: cell.iter().map(|c| c.2.clone()).collect(),
                mean_posterior,
            }
        })
        .collect();
    Ok(PriorSweep { rows })
}

/// A model family for the speed table: its traces (one per trained seed)
/// and the policies to plot.
#[derive(Debug, Clone)]
pub struct SpeedFamily {
    pub name: String,
    pub traces: Vec<TraceSet>,
    pub policies: Vec<ExitPolicy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub family: String,
    pub policy: String,
    pub parameter: String,
    pub mean_exit_depth: f64,
    pub speedup: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
}

/// One full-depth anchor row per family, followed by the family's policies.
pub fn speed_table(families: &[SpeedFamily]) -> Result<Vec<SpeedRow>> {
    let mut rows = Vec::new();
    for fam in families {
        let depth = check_traces(&fam.traces)?;
        for policy in std::iter::once(ExitPolicy::Fixed(depth)).chain(fam.policies.iter().copied()) {
            policy.validate(depth)?;
            let r = aggregate(0.0, depth, &fam.traces, policy)?;
            let text = policy.to_string();
            let parameter = text.split_once(':').map_or("", |(_, v)| v).to_string();
            rows.push(SpeedRow {
                family: fam.name.clone(),
                policy: policy.name().to_string(),
                parameter,
                mean_exit_depth: r.mean_exit_depth,
                speedup: r.speedup,
                metric_mean: r.metric_mean,
                metric_std: r.metric_std,
            });
        }
    }
    Ok(rows)
}

pub fn write_speed_csv<W: Write>(out: W, rows: &[SpeedRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "family",
        "policy",
        "parameter",
        "mean_exit_depth",
        "speedup",
        "metric_mean",
        "metric_std",
    ])?;
    for r in rows {
        w.write_record([
            r.family.clone(),
            r.policy.clone(),
            r.parameter.clone(),
            r.mean_exit_depth.to_string(),
            r.speedup.to_string(),
            r.metric_mean.to_string(),
            r.metric_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
