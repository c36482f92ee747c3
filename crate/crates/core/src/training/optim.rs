use crate::error::{Error, Result};
use crate::grad::Array;
use crate::model::{ParamStore, LAMBDA_PREFIX};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with a separate learning rate for the halting head.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub lambda_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(learning_rate: f64, lambda_learning_rate: f64) -> Self {
        Self {
            learning_rate,
            lambda_learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` holds `(slot, gradient)` pairs and must
    /// cover every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(usize, Array)]) -> Result<()> {
        let mut by_slot: Vec<Option<&Array>> = vec![None; params.len()];
        for (slot, g) in grads {
            if *slot >= params.len() {
                return Err(Error::input(format!("gradient for unknown slot {slot}")));
            }
            by_slot[*slot] = Some(g);
        }
        for (slot, g) in by_slot.iter().enumerate() {
            match g {
                None => return Err(Error::MissingGradient(params.name(slot).to_string())),
                Some(g) if g.shape() != params.array(slot).shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "optimizer_step",
                        lhs: params.array(slot).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, a)| Array::zeros(a.shape())).collect();
            self.v = self.m.clone();
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, g) in by_slot.into_iter().enumerate() {
            let g = g.expect("checked above");
            let lr = if params.name(slot).starts_with(LAMBDA_PREFIX) {
                self.lambda_learning_rate
            } else {
                self.learning_rate
            };
            let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
            let w = params.array_mut(slot).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                if lr != 0.0 {
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    w[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
