//! Central finite-difference gradient checking.

use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::Result;

/// Denominator floor for relative error, so gradients that are zero on
/// both sides do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat position of the worst entry.
    pub worst_entry: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of a scalar function with central
/// differences of step `step` for every entry of every parameter.
///
/// `f` builds the function on a fresh graph from one leaf per parameter and
/// must be deterministic.
pub fn grad_check<F>(f: F, params: &[Array], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().cloned().map(|a| g.input(a)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, a)| g.param(i, a.clone()))
        .collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Array> = grads.param_grads(&g).into_iter().map(|(_, a)| a).collect();

    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, analytic_p) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_entry: 0,
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic_p.data()[e];
            let rel = relative_error(a, numeric);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_entry = e;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        params: checks,
        tol,
        step,
    })
}
