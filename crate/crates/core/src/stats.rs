//! Summary statistics and a chi-square goodness-of-fit test.

use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

#[derive(Debug, Clone)]
pub struct ChiSquareGof {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Number of bins after pooling sparse categories.
    pub bins: usize,
}

impl ChiSquareGof {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value >= significance
    }
}

/// Pearson chi-square test of observed counts against expected probabilities.
///
/// Adjacent categories are pooled left to right until every bin expects at
/// least five observations; a short trailing bin is merged into its
/// predecessor.
pub fn chi_square_gof(counts: &[usize], probs: &[f64]) -> ChiSquareGof {
    assert_eq!(counts.len(), probs.len(), "counts and probs differ in length");
    let total: usize = counts.iter().sum();
    let total = total as f64;

    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        obs += c as f64;
        exp += p * total;
        if exp >= 5.0 {
            bins.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    if exp > 0.0 || obs > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += obs;
                last.1 += exp;
            }
            None => bins.push((obs, exp)),
        }
    }

    let statistic: f64 = bins
        .iter()
        .map(|(o, e)| if *e > 0.0 { (o - e) * (o - e) / e } else { 0.0 })
        .sum();
    let dof = bins.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        1.0 - dist.cdf(statistic)
    };
    ChiSquareGof {
        statistic,
        dof,
        p_value,
        bins: bins.len(),
    }
}
