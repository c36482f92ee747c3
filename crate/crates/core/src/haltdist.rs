//! Exit-layer distributions.
//!
//! Per-layer halting probabilities `λ_1..λ_n` induce a generalized geometric
//! distribution over the layer at which the model exits:
//! `p_i = λ_i · ∏_{j<i} (1 − λ_j)`. The last layer takes the residual mass
//! `∏_{j<n} (1 − λ_j)`, so the distribution covers exactly `n` layers and
//! `λ_n` is never read. The geometric prior is normalized the same way.
//!
//! Everything here is plain `f64` arithmetic with no autodiff; the
//! differentiable version used by the training objective lives in
//! [`crate::training::loss`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Above this depth products are accumulated in log space.
const LOG_SPACE_DEPTH: usize = 32;

/// Default cumulative mass used to truncate the KL support.
pub const TRUNCATION_MASS: f64 = 0.95;

/// Per-layer halting probabilities produced by the Lambda network.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltingVector {
    lambdas: Vec<f64>,
}

impl HaltingVector {
    /// Validates `λ_i ∈ (0, 1)` for every layer but the last. The last entry
    /// is kept for bookkeeping and may be any finite number.
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidProbability("empty halting vector".into()));
        }
        let n = lambdas.len();
        for (i, &l) in lambdas.iter().enumerate().take(n - 1) {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::InvalidProbability(format!(
                    "lambda at layer {} is {l}, expected a value in (0, 1)",
                    i + 1
                )));
            }
        }
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

/// Probability mass over exit layers `1..=n` (stored zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    probs: Vec<f64>,
}

impl ExitDistribution {
    /// Wraps an explicit mass vector. Entries must be non-negative and sum to
    /// one within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbability("empty distribution".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidProbability(format!(
                "mass at layer {} is {p}",
                i + 1
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProbability(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of layers `n`.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Mass of exiting at 1-based layer `i`.
    pub fn prob(&self, layer: usize) -> f64 {
        self.probs[layer - 1]
    }

    /// Prefix sums of the masses, capped at 1. The last entry is pinned to exactly 1.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out: Vec<f64> = self
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc.min(1.0)
            })
            .collect();
        if let Some(last) = out.last_mut() {
            *last = 1.0;
        }
        out
    }

    /// `Σ i · p_i`, in layers.
    pub fn expected_exit_depth(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum()
    }

    /// Draws an exit layer by walking the layers and flipping a coin with
    /// the conditional halting probability `p_i / P(exit ≥ i)` at each one.
    /// Returns a 1-based layer index.
    pub fn sample_exit_index(&self, rng: &mut RngStream) -> usize {
        let n = self.probs.len();
        let mut remaining = 1.0;
        for (i, &p) in self.probs.iter().enumerate().take(n - 1) {
            let hazard = if remaining > 0.0 {
                (p / remaining).min(1.0)
            } else {
                1.0
            };
            if rng.bernoulli(hazard) {
                return i + 1;
            }
            remaining -= p;
        }
        n
    }
}

/// `p_i = λ_i ∏_{j<i}(1 − λ_j)` with the residual rule at layer `n`.
pub fn posterior_from_halting(h: &HaltingVector) -> ExitDistribution {
    let lambdas = h.lambdas();
    let n = lambdas.len();
    let mut probs = Vec::with_capacity(n);
    if n > LOG_SPACE_DEPTH {
        let mut log_survival = 0.0;
        for &l in &lambdas[..n - 1] {
            probs.push((l.ln() + log_survival).exp());
            log_survival += (-l).ln_1p();
        }
        probs.push(log_survival.exp());
    } else {
        let mut survival = 1.0;
        for &l in &lambdas[..n - 1] {
            probs.push(l * survival);
            survival *= 1.0 - l;
        }
        probs.push(survival);
    }
    ExitDistribution { probs }
}

/// Geometric prior over `n` layers, normalized by giving layer `n` the tail.
pub fn geometric_prior(lambda_prior: f64, n: usize) -> Result<ExitDistribution> {
    if !(lambda_prior > 0.0 && lambda_prior < 1.0) {
        return Err(Error::InvalidProbability(format!(
            "prior lambda {lambda_prior} outside (0, 1)"
        )));
    }
    if n < 1 {
        return Err(Error::config("prior needs at least one layer"));
    }
    Ok(posterior_from_halting(&HaltingVector {
        lambdas: vec![lambda_prior; n],
    }))
}

/// 1-based index of the last layer kept in the truncated KL support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TruncationIndex(usize);

impl TruncationIndex {
    pub fn new(j: usize) -> Self {
        assert!(j >= 1, "truncation index is 1-based");
        Self(j)
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Smallest `j` with `Σ_{i≤j} p_i ≥ mass`. Always exists since the CDF ends at 1.
pub fn truncation_index(p: &ExitDistribution, mass: f64) -> TruncationIndex {
    truncation_index_of(p.probs(), mass)
}

/// Same rule applied to a raw mass vector (used by the loss, which holds
/// probabilities for a whole batch).
pub fn truncation_index_of(probs: &[f64], mass: f64) -> TruncationIndex {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if acc >= mass {
            return TruncationIndex(i + 1);
        }
    }
    TruncationIndex(probs.len().max(1))
}

/// How the KL support is cut to the first `j` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTruncation {
    /// Sum the first `j` terms as they are.
    #[default]
    Raw,
    /// Renormalize both distributions over the first `j` layers first.
    Renormalized,
}

/// `Σ_{i≤j} p_i ln(p_i / prior_i)` in nats, with `0 · ln(0/q) = 0`.
pub fn kl_truncated(
    p: &ExitDistribution,
    prior: &ExitDistribution,
    j: TruncationIndex,
) -> Result<f64> {
    kl_truncated_with(p, prior, j, KlTruncation::Raw)
}

pub fn kl_truncated_with(
    p: &ExitDistribution,
    prior: &ExitDistribution,
    j: TruncationIndex,
    mode: KlTruncation,
) -> Result<f64> {
    let j = j.get();
    if p.len() < j || prior.len() < j {
        return Err(Error::LengthMismatch {
            expected: j,
            got: p.len().min(prior.len()),
        });
    }
    let (ps, qs) = (&p.probs()[..j], &prior.probs()[..j]);
    let (p_norm, q_norm) = match mode {
        KlTruncation::Raw => (1.0, 1.0),
        KlTruncation::Renormalized => (ps.iter().sum::<f64>(), qs.iter().sum::<f64>()),
    };
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in ps.iter().zip(qs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::KlUndefined {
                layer: i + 1,
                posterior: pi,
            });
        }
        let (pi, qi) = (pi / p_norm, qi / q_norm);
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Probability-weighted average of per-layer vectors, e.g. class
/// distributions mixed with the posterior exit mass.
pub fn expectation_mixture(weights: &ExitDistribution, per_layer: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_layer.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            got: per_layer.len(),
        });
    }
    let width = per_layer[0].len();
    let mut out = vec![0.0; width];
    for (w, values) in weights.probs().iter().zip(per_layer) {
        if values.len() != width {
            return Err(Error::LengthMismatch {
                expected: width,
                got: values.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(values) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ExitDistribution {
        ExitDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn posterior_near_certain_first_exit() {
        let eps = 1e-12;
        let h = HaltingVector::new(vec![1.0 - eps, 0.5, 0.5, 0.3]).unwrap();
        let p = posterior_from_halting(&h);
        assert_abs_diff_eq!(p.prob(1), 1.0, epsilon = 1e-11);
        for i in 2..=4 {
            assert!(p.prob(i) < 1e-11);
        }
    }

    #[test]
    fn posterior_hand_cases() {
        let p = posterior_from_halting(&HaltingVector::new(vec![0.5, 0.5, 0.9]).unwrap());
        assert_eq!(p.probs(), &[0.5, 0.25, 0.25]);
        let p = posterior_from_halting(&HaltingVector::new(vec![0.2, 0.3, 0.1]).unwrap());
        for (got, want) in p.probs().iter().zip([0.2, 0.24, 0.56]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn posterior_rejects_bad_input() {
        assert!(HaltingVector::new(vec![]).is_err());
        assert!(HaltingVector::new(vec![0.0, 0.5]).is_err());
        assert!(HaltingVector::new(vec![1.0, 0.5]).is_err());
        assert!(HaltingVector::new(vec![0.5, f64::NAN, 0.5]).is_err());
        // last entry is ignored by the residual rule
        assert!(HaltingVector::new(vec![0.5, 1.0]).is_ok());
    }

    #[test]
    fn log_space_matches_direct_products() {
        let lambdas: Vec<f64> = (0..40).map(|i| 0.02 + 0.01 * (i % 7) as f64).collect();
        let p = posterior_from_halting(&HaltingVector::new(lambdas.clone()).unwrap());
        let mut survival = 1.0;
        for (i, l) in lambdas[..39].iter().enumerate() {
            assert_abs_diff_eq!(p.probs()[i], l * survival, epsilon = 1e-14);
            survival *= 1.0 - l;
        }
        assert_abs_diff_eq!(p.probs()[39], survival, epsilon = 1e-14);
    }

    #[test]
    fn geometric_prior_cases() {
        let p = geometric_prior(0.1, 12).unwrap();
        assert_abs_diff_eq!(p.prob(1), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(p.prob(2), 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(p.prob(12), 0.313_810_596_09, epsilon = 1e-11);
        assert_abs_diff_eq!(p.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(geometric_prior(0.5, 1).unwrap().probs(), &[1.0]);
        assert_eq!(geometric_prior(0.5, 2).unwrap().probs(), &[0.5, 0.5]);
        assert!(geometric_prior(0.0, 3).is_err());
        assert!(geometric_prior(1.0, 3).is_err());
        assert!(geometric_prior(0.5, 0).is_err());
    }

    #[test]
    fn truncation_cases() {
        assert_eq!(truncation_index(&dist(&[0.5, 0.3, 0.1, 0.1]), 0.95).get(), 4);
        assert_eq!(truncation_index(&dist(&[0.96, 0.04]), 0.95).get(), 1);
        assert_eq!(truncation_index(&dist(&[1.0]), 0.95).get(), 1);
    }

    #[test]
    fn kl_cases() {
        let prior = geometric_prior(0.1, 5).unwrap();
        assert_eq!(kl_truncated(&prior, &prior, TruncationIndex::new(5)).unwrap(), 0.0);
        let kl = kl_truncated(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75]), TruncationIndex::new(2)).unwrap();
        assert_abs_diff_eq!(kl, 0.143_841_036_225_890_4, epsilon = 1e-12);
        let kl = kl_truncated(&dist(&[0.6, 0.4]), &dist(&[0.1, 0.9]), TruncationIndex::new(2)).unwrap();
        assert_abs_diff_eq!(kl, 0.750_683_595_050_301_2, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_prior_is_an_error() {
        let err = kl_truncated(&dist(&[0.5, 0.5]), &dist(&[0.0, 1.0]), TruncationIndex::new(2));
        assert!(matches!(err, Err(Error::KlUndefined { layer: 1, .. })));
        // zero posterior mass against zero prior mass is fine
        let kl = kl_truncated(&dist(&[0.0, 1.0]), &dist(&[0.0, 1.0]), TruncationIndex::new(2));
        assert_eq!(kl.unwrap(), 0.0);
    }

    #[test]
    fn kl_renormalized_differs_from_raw() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q = dist(&[0.2, 0.2, 0.6]);
        let j = TruncationIndex::new(2);
        let raw = kl_truncated_with(&p, &q, j, KlTruncation::Raw).unwrap();
        let renorm = kl_truncated_with(&p, &q, j, KlTruncation::Renormalized).unwrap();
        let want = 0.625 * (0.625f64 / 0.5).ln() + 0.375 * (0.375f64 / 0.5).ln();
        assert_abs_diff_eq!(renorm, want, epsilon = 1e-12);
        assert!((raw - renorm).abs() > 1e-3);
    }

    #[test]
    fn cdf_cases() {
        let c = dist(&[0.2, 0.24, 0.56]).cdf();
        assert_abs_diff_eq!(c[0], 0.2);
        assert_abs_diff_eq!(c[1], 0.44, epsilon = 1e-15);
        assert_eq!(c[2], 1.0);
        assert_eq!(dist(&[1.0, 0.0, 0.0]).cdf(), vec![1.0, 1.0, 1.0]);
        assert_eq!(dist(&[0.25; 4]).cdf(), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn sampling_degenerate_and_seeded() {
        let p = dist(&[1.0, 0.0, 0.0]);
        let mut rng = RngStream::new(99);
        for _ in 0..100 {
            assert_eq!(p.sample_exit_index(&mut rng), 1);
        }
        let p = dist(&[0.5, 0.25, 0.25]);
        let draw = |seed| {
            let mut rng = RngStream::new(seed);
            (0..50).map(|_| p.sample_exit_index(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn sampling_matches_distribution() {
        let p = dist(&[0.5, 0.25, 0.25]);
        let mut rng = RngStream::new(2024);
        let mut counts = vec![0usize; 3];
        for _ in 0..20_000 {
            counts[p.sample_exit_index(&mut rng) - 1] += 1;
        }
        let gof = crate::stats::chi_square_gof(&counts, p.probs());
        assert!(gof.passes(0.001), "{gof:?}");
    }

    #[test]
    fn expected_depth_cases() {
        assert_eq!(dist(&[1.0, 0.0, 0.0]).expected_exit_depth(), 1.0);
        assert_eq!(dist(&[0.5, 0.5]).expected_exit_depth(), 1.5);
        let e = geometric_prior(0.1, 12).unwrap().expected_exit_depth();
        // E = Σ_i P(exit ≥ i) = Σ_{i<12} 0.9^i
        let survival_sum: f64 = (0..12).map(|i| 0.9f64.powi(i)).sum();
        assert_abs_diff_eq!(e, survival_sum, epsilon = 1e-12);
        assert_abs_diff_eq!(e, 7.175_704_635_19, epsilon = 1e-9);
    }

    #[test]
    fn mixture_cases() {
        let v = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(expectation_mixture(&dist(&[1.0, 0.0]), &v).unwrap(), vec![0.9, 0.1]);
        let sym = expectation_mixture(&dist(&[0.5, 0.5]), &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(sym, vec![0.5, 0.5]);
        let m = expectation_mixture(&dist(&[0.6, 0.4]), &v).unwrap();
        assert_abs_diff_eq!(m[0], 0.62, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 0.38, epsilon = 1e-15);
        assert!(expectation_mixture(&dist(&[1.0]), &v).is_err());
    }

    fn halting_strategy(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..0.999, 1..=max_n)
    }

    proptest! {
        #[test]
        fn posterior_is_a_distribution(lambdas in halting_strategy(48)) {
            let p = posterior_from_halting(&HaltingVector::new(lambdas).unwrap());
            prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let c = p.cdf();
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn prior_ratio_is_geometric(l in 0.01f64..0.99, n in 3usize..40) {
            let p = geometric_prior(l, n).unwrap();
            for i in 0..n - 2 {
                let ratio = p.probs()[i + 1] / p.probs()[i];
                prop_assert!((ratio - (1.0 - l)).abs() < 1e-9);
            }
            let closed = (1.0 - (1.0 - l).powi(n as i32)) / l;
            prop_assert!((p.expected_exit_depth() - closed).abs() < 1e-9);
        }

        #[test]
        fn truncation_characterized_by_cdf(lambdas in halting_strategy(16), mass in 0.05f64..1.0) {
            let p = posterior_from_halting(&HaltingVector::new(lambdas).unwrap());
            let j = truncation_index(&p, mass).get();
            let mut acc = 0.0;
            let prefix: Vec<f64> = p.probs().iter().map(|x| { acc += x; acc }).collect();
            prop_assert!(prefix[j - 1] >= mass || j == p.len());
            prop_assert!(prefix[..j - 1].iter().all(|&c| c < mass));
        }

        #[test]
        fn kl_self_zero_and_full_support_nonnegative(a in halting_strategy(12), l in 0.01f64..0.99) {
            let p = posterior_from_halting(&HaltingVector::new(a).unwrap());
            let n = p.len();
            for j in 1..=n {
                prop_assert_eq!(kl_truncated(&p, &p, TruncationIndex::new(j)).unwrap(), 0.0);
            }
            let prior = geometric_prior(l, n).unwrap();
            prop_assert!(kl_truncated(&p, &prior, TruncationIndex::new(n)).unwrap() >= -1e-12);
        }
    }
}
