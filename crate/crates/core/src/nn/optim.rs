use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{ModelParams, NnError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64, weight_decay: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr, weight_decay: 0.0 }
    }

    pub fn adam(config: AdamConfig) -> Self {
        Optimizer::Adam(AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Sgd { .. } => 0,
            Optimizer::Adam(s) => s.step,
        }
    }

    /// One in-place update. Fails without touching `params` if any gradient
    /// coordinate is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<(), NnError> {
        params.ensure_compatible(grads)?;
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradient".into()));
        }
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                let (lr, wd) = (*lr, *weight_decay);
                for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
                    Zip::from(p).and(g).for_each(|p, &g| *p -= lr * (g + wd * *p));
                }
            }
            Optimizer::Adam(state) => {
                if state.m.is_empty() {
                    state.m = grads.iter().map(|(_, g)| Array2::zeros(g.dim())).collect();
                    state.v = state.m.clone();
                }
                state.step += 1;
                let c = state.config;
                let t = state.step as i32;
                let bias1 = 1.0 - c.beta1.powi(t);
                let bias2 = 1.0 - c.beta2.powi(t);
                for (((_, p), (_, g)), (m, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                {
                    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        let g = g + c.weight_decay * *p;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    });
                }
            }
        }
        if !params.is_finite() {
            return Err(NnError::NonFinite("parameters after update".into()));
        }
        Ok(())
    }
}
