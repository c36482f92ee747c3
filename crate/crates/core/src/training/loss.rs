//! Training objectives over a batched, fully unrolled forward pass.

use crate::error::{Error, Result};
use crate::grad::{Array, Graph, Var};
use crate::haltdist::{truncation_index_of, ExitDistribution, KlTruncation, TRUNCATION_MASS};
use crate::model::LayerVars;

/// Settings of the ponder objective `Σ_i p_i·NLL_i + β·KL_j(p ‖ prior)`.
#[derive(Debug, Clone)]
pub struct PonderObjective {
    pub beta: f64,
    pub prior: ExitDistribution,
    pub truncation: KlTruncation,
    pub mass: f64,
}

impl PonderObjective {
    pub fn new(beta: f64, prior: ExitDistribution, truncation: KlTruncation) -> Self {
        Self {
            beta,
            prior,
            truncation,
            mass: TRUNCATION_MASS,
        }
    }
}

/// Handles into the loss graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// Scalar batch mean of the full objective.
    pub loss: Var,
    /// `[batch, 1]` posterior-weighted NLL.
    pub expected_nll: Var,
    /// `[batch, 1]` truncated KL in nats.
    pub kl: Var,
    /// `[batch, n]` exit posterior.
    pub posterior: Var,
}

fn check_finite(g: &Graph, v: Var, term: &'static str, layer: usize) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, layer })
    }
}

/// Builds the ponder loss for a batch. The exit posterior is formed in log
/// space from the halting logits, so vanishing probabilities do not turn
/// into `ln 0`. Truncation indices come from the current posterior values
/// and are treated as constants.
pub fn ponder_loss(
    g: &mut Graph,
    layers: &[LayerVars],
    targets: &[usize],
    obj: &PonderObjective,
) -> Result<LossVars> {
    let n = layers.len();
    if n == 0 {
        return Err(Error::input("ponder loss needs at least one layer"));
    }
    if obj.prior.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: obj.prior.len(),
        });
    }
    if !(obj.beta >= 0.0 && obj.beta.is_finite()) {
        return Err(Error::config(format!("beta {} must be finite and >= 0", obj.beta)));
    }
    let batch = targets.len();

    let mut nlls = Vec::with_capacity(n);
    let mut log_p = Vec::with_capacity(n);
    let mut log_survival: Option<Var> = None;
    for (i, lv) in layers.iter().enumerate() {
        let layer = i + 1;
        let nll = g.cross_entropy_with_logits(lv.logits, targets)?;
        check_finite(g, nll, "nll", layer)?;
        nlls.push(nll);

        let lp = if layer == n {
            match log_survival {
                Some(s) => s,
                None => g.input(Array::zeros(&[batch, 1])),
            }
        } else {
            let log_halt = g.log_sigmoid(lv.halting_logit);
            let neg = g.scale(lv.halting_logit, -1.0);
            let log_stay = g.log_sigmoid(neg);
            let lp = match log_survival {
                Some(s) => g.add(s, log_halt)?,
                None => log_halt,
            };
            log_survival = Some(match log_survival {
                Some(s) => g.add(s, log_stay)?,
                None => log_stay,
            });
            lp
        };
        check_finite(g, lp, "log_posterior", layer)?;
        log_p.push(lp);
    }

    let log_post = g.concat(&log_p)?;
    let post = g.exp(log_post);
    let nll = g.concat(&nlls)?;
    let weighted = g.mul(post, nll)?;
    let expected_nll = g.sum_last(weighted);

    let probs = g.value(post).clone();
    let cuts: Vec<usize> = probs
        .rows()
        .map(|row| truncation_index_of(row, obj.mass).get())
        .collect();
    let mask: Vec<f64> = cuts
        .iter()
        .flat_map(|&j| (1..=n).map(move |i| if i <= j { 1.0 } else { 0.0 }))
        .collect();
    let log_prior: Vec<f64> = obj.prior.probs().iter().map(|q| q.ln()).collect();
    for (row, &j) in probs.rows().zip(&cuts) {
        for (i, (&p, &q)) in row.iter().zip(obj.prior.probs()).take(j).enumerate() {
            if p > 0.0 && q <= 0.0 {
                return Err(Error::KlUndefined {
                    layer: i + 1,
                    posterior: p,
                });
            }
        }
    }
    let mask = g.input(Array::new(vec![batch, n], mask)?);

    let kl = match obj.truncation {
        KlTruncation::Raw => {
            let lq = g.input(Array::new(vec![1, n], log_prior)?);
            let ratio = g.sub(log_post, lq)?;
            let terms = g.mul(post, ratio)?;
            let terms = g.mul(terms, mask)?;
            g.sum_last(terms)
        }
        KlTruncation::Renormalized => {
            let kept = g.mul(post, mask)?;
            let mass = g.sum_last(kept);
            let log_mass = g.log(mass);
            let lp = g.sub(log_post, log_mass)?;
            let mut lq = Vec::with_capacity(batch * n);
            for &j in &cuts {
                let z: f64 = obj.prior.probs()[..j].iter().sum::<f64>().ln();
                lq.extend(log_prior.iter().map(|q| q - z));
            }
            let lq = g.input(Array::new(vec![batch, n], lq)?);
            let p = g.exp(lp);
            let p = g.mul(p, mask)?;
            let ratio = g.sub(lp, lq)?;
            let terms = g.mul(p, ratio)?;
            g.sum_last(terms)
        }
    };
    check_finite(g, kl, "kl", cuts.iter().copied().max().unwrap_or(n))?;

    let scaled = g.scale(kl, obj.beta);
    let per_example = g.add(expected_nll, scaled)?;
    let loss = g.mean(per_example);
    Ok(LossVars {
        loss,
        expected_nll,
        kl,
        posterior: post,
    })
}

/// Objective value for one example from explicit per-layer quantities.
pub fn ponder_loss_value(
    posterior: &ExitDistribution,
    nll: &[f64],
    beta: f64,
    prior: &ExitDistribution,
    mode: KlTruncation,
) -> Result<f64> {
    if nll.len() != posterior.len() {
        return Err(Error::LengthMismatch {
            expected: posterior.len(),
            got: nll.len(),
        });
    }
    let mut expected = 0.0;
    for (i, (p, l)) in posterior.probs().iter().zip(nll).enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFinite {
                term: "nll",
                layer: i + 1,
            });
        }
        expected += p * l;
    }
    let j = crate::haltdist::truncation_index(posterior, TRUNCATION_MASS);
    let kl = crate::haltdist::kl_truncated_with(posterior, prior, j, mode)?;
    Ok(expected + beta * kl)
}

/// Mean cross-entropy of the last layer only.
pub fn vanilla_loss(g: &mut Graph, layers: &[LayerVars], targets: &[usize]) -> Result<Var> {
    let last = layers
        .last()
        .ok_or_else(|| Error::input("vanilla loss needs at least one layer"))?;
    let nll = g.cross_entropy_with_logits(last.logits, targets)?;
    check_finite(g, nll, "nll", layers.len())?;
    Ok(g.mean(nll))
}

/// Depth-weighted mean of per-layer cross-entropies, `Σ_i i·NLL_i / Σ_i i`,
/// as used for patience-based exit models.
pub fn pabee_loss(g: &mut Graph, layers: &[LayerVars], targets: &[usize]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::input("pabee loss needs at least one layer"));
    }
    let n = layers.len();
    let total = (n * (n + 1) / 2) as f64;
    let mut acc: Option<Var> = None;
    for (i, lv) in layers.iter().enumerate() {
        let nll = g.cross_entropy_with_logits(lv.logits, targets)?;
        check_finite(g, nll, "nll", i + 1)?;
        let w = g.scale(nll, (i + 1) as f64 / total);
        acc = Some(match acc {
            Some(a) => g.add(a, w)?,
            None => w,
        });
    }
    Ok(g.mean(acc.expect("at least one layer")))
}
