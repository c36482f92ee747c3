use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::sweep::{speed_table, sweep_prior, sweep_q, write_speed_csv, write_sweep_csv, SpeedFamily, SweepAxis, SweepSpec};
use super::{write_outcomes_csv, write_summary_csv, RunConfig, RunManifest, SummaryRow};
use crate::benchdata::{Dataset, Split};
use crate::error::{Error, Result};
use crate::exitpolicy::{evaluate, ExitPolicy, TraceSet};
use crate::model::{Checkpoint, PonderModel};
use crate::training::{grid_search, run_ablation, train, write_epoch_csv, EPOCH_CSV_HEADER};

/// Inputs shared by every command.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Directory holding `train.tsv`, `dev.tsv` and `test.tsv`; generated
    /// from the config's task when absent.
    pub data: Option<PathBuf>,
}

/// Files a command wrote, in the order written.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

struct Run<'a> {
    common: &'a Common,
    manifest: RunManifest,
    start: Instant,
}

impl<'a> Run<'a> {
    fn start(command: &str, common: &'a Common) -> Result<Self> {
        common.config.validate()?;
        fs::create_dir_all(&common.out)?;
        Ok(Self {
            common,
            manifest: RunManifest::new(command, &common.config)?,
            start: Instant::now(),
        })
    }

    fn data(&self) -> Result<Dataset> {
        self.common.config.dataset(self.common.data.as_deref())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.common.out.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn finish(mut self) -> Result<CommandOutput> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let manifest = self.common.out.join(format!("{}.manifest.json", self.manifest.command));
        self.manifest.write(&manifest)?;
        Ok(CommandOutput {
            files: self.manifest.outputs.iter().map(|f| self.common.out.join(f)).collect(),
            manifest,
        })
    }
}

fn load_traces(paths: &[PathBuf], examples: &[crate::benchdata::Example]) -> Result<Vec<TraceSet>> {
    if paths.is_empty() {
        return Err(Error::config("at least one checkpoint is required"));
    }
    paths
        .iter()
        .map(|p| {
            let ck = Checkpoint::load(p)?;
            let m = PonderModel::new(ck.model)?;
            TraceSet::compute(&m, &ck.params, examples)
        })
        .collect()
}

pub fn cmd_gen_data(common: &Common) -> Result<CommandOutput> {
    let mut run = Run::start("gen-data", common)?;
    let data = crate::benchdata::generate(&common.config.task)?;
    let dir = run.path("data");
    data.save(&dir)?;
    run.finish()
}

/// Trains with `config.train` and writes `checkpoint.json` and `epochs.csv`.
pub fn cmd_train(common: &Common) -> Result<CommandOutput> {
    let mut run = Run::start("train", common)?;
    let data = run.data()?;
    let cfg = &common.config;
    let report = train(&cfg.model, &cfg.train, &data.train, &data.dev)?;
    let mut ck = Checkpoint::new(report.model.clone(), report.params.clone());
    ck.meta = serde_json::json!({
        "train": report.config,
        "best_epoch": report.best_epoch,
        "best_metric": report.best_metric,
        "epochs_run": report.epochs.len(),
    });
    ck.save(&run.path("checkpoint.json"))?;
    let mut w = csv::Writer::from_writer(run.create("epochs.csv")?);
    w.write_record(EPOCH_CSV_HEADER)?;
    write_epoch_csv(&mut w, "train", cfg.train.seed, &report.epochs)?;
    w.flush()?;
    run.finish()
}

/// Writes `outcomes.csv` (one row per example) and `summary.csv`.
pub fn cmd_eval(common: &Common, checkpoint: &Path, policy: ExitPolicy, split: Split) -> Result<CommandOutput> {
    let mut run = Run::start("eval", common)?;
    let data = run.data()?;
    let ck = Checkpoint::load(checkpoint)?;
    let m = PonderModel::new(ck.model)?;
    let summary = evaluate(&m, &ck.params, data.split(split), policy)?;
    if summary.outcomes.is_empty() {
        return Err(Error::input(format!("split `{}` is empty", split.name())));
    }
    write_outcomes_csv(run.create("outcomes.csv")?, &summary.outcomes)?;
    write_summary_csv(run.create("summary.csv")?, &[SummaryRow::from_summary(&summary, split.name())])?;
    run.finish()
}

pub fn cmd_sweep_q(common: &Common, checkpoints: &[PathBuf], split: Split) -> Result<CommandOutput> {
    let mut run = Run::start("sweep-q", common)?;
    let data = run.data()?;
    let traces = load_traces(checkpoints, data.split(split))?;
    let rows = sweep_q(&traces, &common.config.q_values)?;
    write_sweep_csv(run.create("sweep_q.csv")?, SweepAxis::Q, &rows)?;
    run.finish()
}

pub fn cmd_sweep_prior(common: &Common) -> Result<CommandOutput> {
    let mut run = Run::start("sweep-prior", common)?;
    let data = run.data()?;
    let cfg = &common.config;
    let spec = SweepSpec::new(SweepAxis::LambdaPrior, cfg.lambda_priors.clone(), cfg.seeds.clone())?;
    let sweep = sweep_prior(&cfg.model, &cfg.train, &data, &spec)?;
    sweep.write_metrics(run.create("prior_metrics.csv")?)?;
    sweep.write_histograms(run.create("prior_histogram.csv")?)?;
    sweep.write_posterior(run.create("prior_posterior.csv")?)?;
    run.finish()
}

/// Q-exit rows for the ponder family and patience rows for the PABEE family.
pub fn cmd_speed(common: &Common, ponder: &[PathBuf], pabee: &[PathBuf], split: Split) -> Result<CommandOutput> {
    let mut run = Run::start("speed", common)?;
    let data = run.data()?;
    let examples = data.split(split);
    let cfg = &common.config;
    let families = [
        SpeedFamily {
            name: "ponder".into(),
            traces: load_traces(ponder, examples)?,
            policies: cfg.q_values.iter().map(|&q| ExitPolicy::QExit(q)).collect(),
        },
        SpeedFamily {
            name: "pabee".into(),
            traces: load_traces(pabee, examples)?,
            policies: cfg.patience_values.iter().map(|&t| ExitPolicy::Patience(t)).collect(),
        },
    ];
    let rows = speed_table(&families)?;
    write_speed_csv(run.create("speed.csv")?, &rows)?;
    run.finish()
}

pub fn cmd_ablation(common: &Common) -> Result<CommandOutput> {
    let mut run = Run::start("ablation", common)?;
    let data = run.data()?;
    let cfg = &common.config;
    let table = run_ablation(&cfg.model, &cfg.train, &data, &cfg.seeds)?;
    table.write_csv(run.create("ablation.csv")?)?;
    run.finish()
}

pub fn cmd_grid_search(common: &Common) -> Result<CommandOutput> {
    let mut run = Run::start("grid-search", common)?;
    let data = run.data()?;
    let cfg = &common.config;
    let result = grid_search(&cfg.model, &cfg.train, &cfg.grid, &data.train, &data.dev, &cfg.seeds)?;
    result.write_cells(run.create("grid_cells.csv")?)?;
    result.write_epochs(run.create("grid_epochs.csv")?)?;
    run.finish()
}
