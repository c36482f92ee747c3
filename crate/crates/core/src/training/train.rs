use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loss::{pabee_loss, ponder_loss, vanilla_loss, PonderObjective};
use super::optim::Adam;
use crate::benchdata::Example;
use crate::error::{Error, Result};
use crate::exitpolicy::{evaluate, ExitPolicy};
use crate::grad::{Graph, Var};
use crate::haltdist::{geometric_prior, KlTruncation};
use crate::model::{BoundParams, ModelConfig, ParamStore, PonderModel};
use crate::rng::RngStream;

/// PABEE-style models are validated with this patience, capped at the depth.
pub const DEFAULT_VALIDATION_PATIENCE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Posterior-weighted NLL plus truncated KL to the geometric prior.
    Ponder,
    /// Cross-entropy of the last layer only.
    Vanilla,
    /// Depth-weighted cross-entropy over all layers.
    Pabee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda_learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda_prior: f64,
    #[serde(default = "default_patience")]
    pub patience_epochs: usize,
    pub max_epochs: usize,
    /// Drives initialization, shuffling and dropout.
    pub seed: u64,
    #[serde(default)]
    pub kl_truncation_mode: KlTruncation,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    /// Overrides the objective's default validation policy.
    #[serde(default)]
    pub validation_policy: Option<ExitPolicy>,
}

fn default_patience() -> usize {
    5
}

fn default_objective() -> Objective {
    Objective::Ponder
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lambda_learning_rate: 3e-3,
            batch_size: 32,
            beta: 0.5,
            lambda_prior: 0.1,
            patience_epochs: default_patience(),
            max_epochs: 40,
            seed: 0,
            kl_truncation_mode: KlTruncation::Raw,
            objective: Objective::Ponder,
            validation_policy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.lambda_learning_rate > 0.0 && self.lambda_learning_rate.is_finite()) {
            return fail(format!("lambda_learning_rate {} must be > 0", self.lambda_learning_rate));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta {} must be >= 0", self.beta));
        }
        if !(self.lambda_prior > 0.0 && self.lambda_prior < 1.0) {
            return fail(format!("lambda_prior {} outside (0, 1)", self.lambda_prior));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn validation_policy(&self, depth: usize) -> ExitPolicy {
        self.validation_policy.unwrap_or(match self.objective {
            Objective::Ponder => ExitPolicy::QExit(0.5),
            Objective::Vanilla => ExitPolicy::Fixed(depth),
            Objective::Pabee => ExitPolicy::Patience(DEFAULT_VALIDATION_PATIENCE.min(depth)),
        })
    }
}

/// Stops once `patience` epochs have passed without a strictly better metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    epoch: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            epoch: 0,
            best: None,
        }
    }

    /// Records the next epoch's metric; true if it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.epoch += 1;
        let improved = match self.best {
            None => true,
            Some((_, b)) => metric > b,
        };
        if improved {
            self.best = Some((self.epoch, metric));
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        match self.best {
            Some((e, _)) => self.epoch - e >= self.patience,
            None => false,
        }
    }

    /// 1-based best epoch and its metric.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch objective over the epoch.
    pub train_loss: f64,
    pub dev_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Objective over the training set at initialization, without dropout.
    pub initial_train_loss: f64,
    pub wall_clock_secs: f64,
    /// Parameters of the best epoch.
    pub params: ParamStore,
}

impl TrainReport {
    pub fn best_train_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].train_loss
    }
}

/// Objective for one batch built on `g`.
pub fn batch_loss(
    model: &PonderModel,
    g: &mut Graph,
    params: &BoundParams,
    batch: &[&Example],
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Var> {
    let tokens: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let layers = model.forward_batch(g, params, &tokens, rng)?;
    match config.objective {
        Objective::Ponder => {
            let prior = geometric_prior(config.lambda_prior, model.depth())?;
            let obj = PonderObjective::new(config.beta, prior, config.kl_truncation_mode);
            Ok(ponder_loss(g, &layers, &targets, &obj)?.loss)
        }
        Objective::Vanilla => vanilla_loss(g, &layers, &targets),
        Objective::Pabee => pabee_loss(g, &layers, &targets),
    }
}

fn dataset_loss(model: &PonderModel, params: &ParamStore, data: &[Example], config: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = RngStream::new(0);
    for chunk in data.chunks(config.batch_size.max(64)) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let batch: Vec<&Example> = chunk.iter().collect();
        let loss = batch_loss(model, &mut g, &bound, &batch, config, &mut rng)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains from scratch with `model.init_seed` replaced by `config.seed`.
/// The dev split is evaluated once per epoch.
pub fn train(model: &ModelConfig, config: &TrainConfig, train_set: &[Example], dev: &[Example]) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::input("train and dev splits must be non-empty"));
    }
    let start = Instant::now();
    let model_cfg = ModelConfig {
        init_seed: config.seed,
        ..model.clone()
    };
    let model = PonderModel::new(model_cfg.clone())?;
    let policy = config.validation_policy(model.depth());
    policy.validate(model.depth())?;

    let mut params = model.init_params();
    let initial_train_loss = dataset_loss(&model, &params, train_set, config)?;
    let mut adam = Adam::new(config.learning_rate, config.lambda_learning_rate);
    let mut shuffle_rng = RngStream::with_stream(config.seed, 1);
    let mut dropout_rng = RngStream::with_stream(config.seed, 2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut stopper = EarlyStopping::new(config.patience_epochs);
    let mut best_params = params.clone();
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::training();
            let bound = params.bind(&mut g);
            let loss = batch_loss(&model, &mut g, &bound, &batch, config, &mut dropout_rng)?;
            loss_sum += g.value(loss).item() * batch.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut params, &grads.param_grads(&g))?;
        }
        let metric = evaluate(&model, &params, dev, policy)?.accuracy();
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            dev_metric: metric,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if stopper.observe(metric) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (best_epoch, best_metric) = stopper.best().expect("at least one epoch ran");
    Ok(TrainReport {
        model: model_cfg,
        config: config.clone(),
        epochs,
        best_epoch,
        best_metric,
        initial_train_loss,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        params: best_params,
    })
}

/// Appends per-epoch rows `config_id,seed,epoch,split,metric,loss`. Train
/// rows carry the loss, dev rows the metric; the other field is empty.
pub fn write_epoch_csv<W: Write>(
    writer: &mut csv::Writer<W>,
    config_id: &str,
    seed: u64,
    epochs: &[EpochRecord],
) -> Result<()> {
    for e in epochs {
        let (epoch, seed) = (e.epoch.to_string(), seed.to_string());
        writer.write_record([config_id, &seed, &epoch, "train", "", &e.train_loss.to_string()])?;
        writer.write_record([config_id, &seed, &epoch, "dev", &e.dev_metric.to_string(), ""])?;
    }
    Ok(())
}

pub const EPOCH_CSV_HEADER: [&str; 6] = ["config_id", "seed", "epoch", "split", "metric", "loss"];
