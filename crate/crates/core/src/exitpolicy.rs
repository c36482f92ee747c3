//! Layer-by-layer exit rules for incremental inference.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::benchdata::Example;
use crate::error::{Error, Result};
use crate::haltdist::expectation_mixture;
use crate::model::{argmax, LayerRecord, ParamStore, PonderModel};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue,
    Exit,
}

impl Step {
    fn from_bool(exit: bool) -> Self {
        if exit {
            Step::Exit
        } else {
            Step::Continue
        }
    }
}

/// Q-exit at layer `i` of `n`. `accumulated_cdf` is `Σ_{j<i} p_j` and
/// `survival` is `∏_{j<i}(1 − λ_j)`.
pub fn q_exit_step(accumulated_cdf: f64, lambda_i: f64, survival: f64, q: f64, i: usize, n: usize) -> Step {
    if i >= n {
        return Step::Exit;
    }
    Step::from_bool(accumulated_cdf + lambda_i * survival >= q)
}

pub fn sample_step(lambda_i: f64, rng: &mut RngStream, i: usize, n: usize) -> Step {
    if i >= n {
        return Step::Exit;
    }
    Step::from_bool(rng.bernoulli(lambda_i))
}

/// Returns the decision and the updated streak.
pub fn patience_step(
    current: usize,
    previous: Option<usize>,
    streak: usize,
    t: usize,
    i: usize,
    n: usize,
) -> (Step, usize) {
    let streak = if previous == Some(current) { streak + 1 } else { 1 };
    (Step::from_bool(streak >= t || i >= n), streak)
}

/// Shannon entropy of `softmax(logits)` in nats.
pub fn entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lz = z.ln();
    logits
        .iter()
        .map(|v| {
            let lp = v - max - lz;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn entropy_step(logits: &[f64], threshold: f64, i: usize, n: usize) -> Step {
    Step::from_bool(i >= n || entropy(logits) < threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExitPolicy {
    QExit(f64),
    /// Posterior sampling; the value seeds one stream per example.
    Sample(u64),
    Expectation,
    Patience(usize),
    Entropy(f64),
    Fixed(usize),
}

impl ExitPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ExitPolicy::QExit(_) => "q_exit",
            ExitPolicy::Sample(_) => "sample",
            ExitPolicy::Expectation => "expectation",
            ExitPolicy::Patience(_) => "patience",
            ExitPolicy::Entropy(_) => "entropy",
            ExitPolicy::Fixed(_) => "fixed",
        }
    }

    /// Whether the policy can stop before the last layer.
    pub fn is_early_exit(&self) -> bool {
        !matches!(self, ExitPolicy::Expectation)
    }

    /// Checks the policy's parameter, including against depth `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Policy(m));
        match *self {
            ExitPolicy::QExit(q) if !(q > 0.0 && q <= 1.0) => bad(format!("q {q} outside (0, 1]")),
            ExitPolicy::Patience(0) => bad("patience must be at least 1".into()),
            ExitPolicy::Patience(t) if t > n => bad(format!("patience {t} exceeds depth {n}")),
            ExitPolicy::Entropy(h) if !(h >= 0.0 && h.is_finite()) => {
                bad(format!("entropy threshold {h} must be finite and >= 0"))
            }
            ExitPolicy::Fixed(k) if k == 0 || k > n => bad(format!("fixed depth {k} outside 1..={n}")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ExitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitPolicy::QExit(q) => write!(f, "q_exit:{q}"),
            ExitPolicy::Sample(s) => write!(f, "sample:{s}"),
            ExitPolicy::Expectation => write!(f, "expectation"),
            ExitPolicy::Patience(t) => write!(f, "patience:{t}"),
            ExitPolicy::Entropy(h) => write!(f, "entropy:{h}"),
            ExitPolicy::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl TryFrom<String> for ExitPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExitPolicy> for String {
    fn from(p: ExitPolicy) -> String {
        p.to_string()
    }
}

impl FromStr for ExitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, value) = match s.split_once(':') {
            Some((n, v)) => (n, Some(v)),
            None => (s, None),
        };
        let need = || value.ok_or_else(|| Error::Policy(format!("`{name}` needs a value, e.g. `{name}:1`")));
        let real = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Policy(format!("`{v}` is not a number in `{s}`")))
        };
        let int = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| Error::Policy(format!("`{v}` is not a non-negative integer in `{s}`")))
        };
        let policy = match name {
            "q_exit" => ExitPolicy::QExit(real(need()?)?),
            "sample" => ExitPolicy::Sample(int(need()?)?),
            "patience" => ExitPolicy::Patience(int(need()?)? as usize),
            "entropy" => ExitPolicy::Entropy(real(need()?)?),
            "fixed" => ExitPolicy::Fixed(int(need()?)? as usize),
            "expectation" => {
                if value.is_some() {
                    return Err(Error::Policy("`expectation` takes no value".into()));
                }
                ExitPolicy::Expectation
            }
            other => return Err(Error::Policy(format!("unknown policy `{other}`"))),
        };
        policy.validate(usize::MAX)?;
        Ok(policy)
    }
}

/// Per-inference state of a streaming policy.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum StreamingRule {
    QExit { q: f64, cdf: f64, survival: f64 },
    Sample { rng: RngStream },
    Patience { t: usize, previous: Option<usize>, streak: usize },
    Entropy { threshold: f64 },
    Fixed { k: usize },
}

impl StreamingRule {
    /// Fresh state for `policy`; `example_index` selects the sampling stream.
    /// Returns `None` for the expectation policy.
    pub fn new(policy: ExitPolicy, example_index: u64) -> Option<Self> {
        Some(match policy {
            ExitPolicy::QExit(q) => StreamingRule::QExit {
                q,
                cdf: 0.0,
                survival: 1.0,
            },
            ExitPolicy::Sample(seed) => StreamingRule::Sample {
                rng: RngStream::with_stream(seed, example_index),
            },
            ExitPolicy::Patience(t) => StreamingRule::Patience {
                t,
                previous: None,
                streak: 0,
            },
            ExitPolicy::Entropy(threshold) => StreamingRule::Entropy { threshold },
            ExitPolicy::Fixed(k) => StreamingRule::Fixed { k },
            ExitPolicy::Expectation => return None,
        })
    }

    /// Feeds layer `i` (1-based) of `n`.
    pub fn observe(&mut self, i: usize, n: usize, record: &LayerRecord) -> Step {
        self.observe_parts(i, n, record.lambda, &record.logits)
    }

    pub fn observe_parts(&mut self, i: usize, n: usize, lambda: f64, logits: &[f64]) -> Step {
        match self {
            StreamingRule::QExit { q, cdf, survival } => {
                let step = q_exit_step(*cdf, lambda, *survival, *q, i, n);
                *cdf += if i >= n { *survival } else { lambda * *survival };
                *survival *= 1.0 - lambda;
                step
            }
            StreamingRule::Sample { rng } => sample_step(lambda, rng, i, n),
            StreamingRule::Patience { t, previous, streak } => {
                let current = argmax(logits);
                let (step, s) = patience_step(current, *previous, *streak, *t, i, n);
                *streak = s;
                *previous = Some(current);
                step
            }
            StreamingRule::Entropy { threshold } => entropy_step(logits, *threshold, i, n),
            StreamingRule::Fixed { k } => Step::from_bool(i >= *k || i >= n),
        }
    }

    /// Running CDF for Q-exit.
    pub fn cdf(&self) -> Option<f64> {
        match self {
            StreamingRule::QExit { cdf, .. } => Some(*cdf),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitDecision {
    pub exit_layer: usize,
    pub prediction: usize,
    /// Step-cell applications actually performed.
    pub layers_evaluated: usize,
    /// Class distribution the prediction was taken from.
    pub class_probs: Vec<f64>,
    /// Q-exit only.
    pub cdf_at_exit: Option<f64>,
}

/// Runs one input under `policy`, evaluating layers lazily.
pub fn run_policy(
    model: &PonderModel,
    params: &ParamStore,
    tokens: &[usize],
    policy: ExitPolicy,
    example_index: u64,
) -> Result<ExitDecision> {
    let n = model.depth();
    policy.validate(n)?;
    let Some(mut rule) = StreamingRule::new(policy, example_index) else {
        let trace = model.forward_full(params, tokens)?;
        let post = trace.posterior()?;
        let per_layer: Vec<Vec<f64>> = trace.layers.iter().map(|l| l.class_probs()).collect();
        let mix = expectation_mixture(&post, &per_layer)?;
        return Ok(ExitDecision {
            exit_layer: n,
            prediction: argmax(&mix),
            layers_evaluated: n,
            class_probs: mix,
            cdf_at_exit: None,
        });
    };
    let (trace, invocations) = model.forward_incremental(params, tokens, |i, rec| {
        match rule.observe(i, n, rec) {
            Step::Exit => ControlFlow::Break(()),
            Step::Continue => ControlFlow::Continue(()),
        }
    })?;
    let last = trace.layers.last().expect("at least one layer is evaluated");
    Ok(ExitDecision {
        exit_layer: trace.len(),
        prediction: last.prediction(),
        layers_evaluated: invocations,
        class_probs: last.class_probs(),
        cdf_at_exit: rule.cdf(),
    })
}

/// Outcome of one example in an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleOutcome {
    pub example_id: usize,
    pub difficulty: usize,
    pub exit_layer: usize,
    pub layers_evaluated: usize,
    pub prediction: usize,
    pub label: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub policy: ExitPolicy,
    pub depth: usize,
    pub outcomes: Vec<ExampleOutcome>,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        if self.outcomes.is_empty() {
            return f64::NAN;
        }
        self.outcomes.iter().filter(|o| o.correct).count() as f64 / self.outcomes.len() as f64
    }

    /// Mean number of step-cell applications per example.
    pub fn mean_exit_depth(&self) -> f64 {
        if self.outcomes.is_empty() {
            return f64::NAN;
        }
        self.outcomes.iter().map(|o| o.layers_evaluated).sum::<usize>() as f64 / self.outcomes.len() as f64
    }

    pub fn speedup(&self) -> f64 {
        self.depth as f64 / self.mean_exit_depth()
    }

    /// Mean evaluated depth per difficulty stratum, indexed by stratum.
    pub fn depth_by_difficulty(&self) -> Vec<f64> {
        let levels = self.outcomes.iter().map(|o| o.difficulty + 1).max().unwrap_or(0);
        (0..levels)
            .map(|d| {
                let v: Vec<f64> = self
                    .outcomes
                    .iter()
                    .filter(|o| o.difficulty == d)
                    .map(|o| o.layers_evaluated as f64)
                    .collect();
                crate::stats::mean(&v)
            })
            .collect()
    }

    /// Counts of exit layers `1..=n`.
    pub fn exit_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.depth];
        for o in &self.outcomes {
            h[o.exit_layer - 1] += 1;
        }
        h
    }
}

/// Evaluates every example under `policy`. Example `k` uses sampling stream `k`.
pub fn evaluate(
    model: &PonderModel,
    params: &ParamStore,
    examples: &[Example],
    policy: ExitPolicy,
) -> Result<EvalSummary> {
    let outcomes = examples
        .iter()
        .enumerate()
        .map(|(k, ex)| {
            let d = run_policy(model, params, &ex.tokens, policy, k as u64)?;
            Ok(ExampleOutcome {
                example_id: k,
                difficulty: ex.difficulty,
                exit_layer: d.exit_layer,
                layers_evaluated: d.layers_evaluated,
                prediction: d.prediction,
                label: ex.label,
                correct: d.prediction == ex.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        policy,
        depth: model.depth(),
        outcomes,
    })
}

/// Exit of a streaming policy replayed over an already computed trace.
/// Gives the same decision as [`run_policy`] without re-running the model.
pub fn replay(records: &[LayerRecord], policy: ExitPolicy, example_index: u64) -> Result<ExitDecision> {
    let n = records.len();
    if n == 0 {
        return Err(Error::input("cannot replay an empty trace"));
    }
    policy.validate(n)?;
    let Some(mut rule) = StreamingRule::new(policy, example_index) else {
        let lambdas: Vec<f64> = records.iter().map(|r| r.lambda).collect();
        let post = crate::haltdist::posterior_from_halting(&crate::haltdist::HaltingVector::new(lambdas)?);
        let per_layer: Vec<Vec<f64>> = records.iter().map(|l| l.class_probs()).collect();
        let mix = expectation_mixture(&post, &per_layer)?;
        return Ok(ExitDecision {
            exit_layer: n,
            prediction: argmax(&mix),
            layers_evaluated: n,
            class_probs: mix,
            cdf_at_exit: None,
        });
    };
    for (k, rec) in records.iter().enumerate() {
        if rule.observe(k + 1, n, rec) == Step::Exit {
            return Ok(ExitDecision {
                exit_layer: k + 1,
                prediction: rec.prediction(),
                layers_evaluated: k + 1,
                class_probs: rec.class_probs(),
                cdf_at_exit: rule.cdf(),
            });
        }
    }
    unreachable!("every streaming rule exits at the last layer")
}

/// Full traces of a set of examples, for evaluating many policies at once.
#[derive(Debug, Clone)]
pub struct TraceSet {
    pub depth: usize,
    pub traces: Vec<Vec<LayerRecord>>,
    pub labels: Vec<usize>,
    pub difficulties: Vec<usize>,
}

impl TraceSet {
    pub fn compute(model: &PonderModel, params: &ParamStore, examples: &[Example]) -> Result<Self> {
        use rayon::prelude::*;
        let traces = examples
            .par_iter()
            .map(|ex| model.forward_full(params, &ex.tokens).map(|t| t.layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            depth: model.depth(),
            traces,
            labels: examples.iter().map(|e| e.label).collect(),
            difficulties: examples.iter().map(|e| e.difficulty).collect(),
        })
    }

    pub fn evaluate(&self, policy: ExitPolicy) -> Result<EvalSummary> {
        let outcomes = self
            .traces
            .iter()
            .enumerate()
            .map(|(k, tr)| {
                let d = replay(tr, policy, k as u64)?;
                Ok(ExampleOutcome {
                    example_id: k,
                    difficulty: self.difficulties[k],
                    exit_layer: d.exit_layer,
                    layers_evaluated: d.layers_evaluated,
                    prediction: d.prediction,
                    label: self.labels[k],
                    correct: d.prediction == self.labels[k],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSummary {
            policy,
            depth: self.depth,
            outcomes,
        })
    }

    /// Analytic exit posterior averaged over the set.
    pub fn mean_posterior(&self) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.depth];
        for tr in &self.traces {
            let lambdas: Vec<f64> = tr.iter().map(|r| r.lambda).collect();
            let post = crate::haltdist::posterior_from_halting(&crate::haltdist::HaltingVector::new(lambdas)?);
            for (a, p) in acc.iter_mut().zip(post.probs()) {
                *a += p;
            }
        }
        let n = self.traces.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}
