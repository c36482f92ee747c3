use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train, write_epoch_csv, EpochRecord, TrainConfig, EPOCH_CSV_HEADER};
use crate::benchdata::Example;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub lambda_learning_rates: Vec<f64>,
}

impl HyperGrid {
    /// Cells in sweep order: learning rate, then batch size, then halting-head rate.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &bs in &self.batch_sizes {
                for &llr in &self.lambda_learning_rates {
                    out.push(TrainConfig {
                        learning_rate: lr,
                        batch_size: bs,
                        lambda_learning_rate: llr,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.learning_rates.len() * self.batch_sizes.len() * self.lambda_learning_rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub config_id: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    /// Best dev metric per seed.
    pub metrics: Vec<f64>,
    pub epochs: Vec<Vec<EpochRecord>>,
}

impl GridCell {
    pub fn mean(&self) -> f64 {
        stats::mean(&self.metrics)
    }

    pub fn std(&self) -> f64 {
        stats::std_dev(&self.metrics)
    }

    pub fn median(&self) -> f64 {
        stats::median(&self.metrics)
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    pub fn write_epochs<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EPOCH_CSV_HEADER)?;
        for cell in &self.cells {
            for (seed, epochs) in cell.seeds.iter().zip(&cell.epochs) {
                write_epoch_csv(&mut w, &cell.config_id, *seed, epochs)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per cell.
    pub fn write_cells<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "config_id",
            "learning_rate",
            "batch_size",
            "lambda_learning_rate",
            "mean",
            "std",
            "median",
            "selected",
        ])?;
        for (i, c) in self.cells.iter().enumerate() {
            w.write_record([
                c.config_id.clone(),
                c.config.learning_rate.to_string(),
                c.config.batch_size.to_string(),
                c.config.lambda_learning_rate.to_string(),
                c.mean().to_string(),
                c.std().to_string(),
                c.median().to_string(),
                (i == self.best).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every cell under every seed and picks the best mean dev metric.
/// Ties go to the smaller learning rate, then the smaller batch, then the
/// smaller halting-head rate.
pub fn grid_search(
    model: &ModelConfig,
    base: &TrainConfig,
    grid: &HyperGrid,
    train_set: &[Example],
    dev: &[Example],
    seeds: &[u64],
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::config("hyperparameter grid has no cells"));
    }
    if seeds.is_empty() {
        return Err(Error::config("grid search needs at least one seed"));
    }
    let configs = grid.cells(base);
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = TrainConfig {
                seed,
                ..configs[c].clone()
            };
            train(model, &cfg, train_set, dev).map(|r| (r.best_metric, r.epochs))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs = runs.into_iter();
    let cells: Vec<GridCell> = configs
        .into_iter()
        .enumerate()
        .map(|(i, config)| {
            let (metrics, epochs) = runs.by_ref().take(seeds.len()).unzip();
            GridCell {
                config_id: format!("cell{i:03}"),
                config,
                seeds: seeds.to_vec(),
                metrics,
                epochs,
            }
        })
        .collect();

    let mut best = 0;
    for i in 1..cells.len() {
        let (a, b) = (&cells[i], &cells[best]);
        let key = |c: &GridCell| (c.config.learning_rate, c.config.batch_size, c.config.lambda_learning_rate);
        let better = a.mean() > b.mean()
            || (a.mean() == b.mean() && key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less));
        if better {
            best = i;
        }
    }
    Ok(GridResult { cells, best })
}
