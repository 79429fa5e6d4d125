use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Step-decay learning-rate schedule keyed on completed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            decay_epochs: vec![26, 34, 40],
            factor: 0.5,
        }
    }
}

impl LrSchedule {
    /// Rate in effect once `completed` epochs have finished.
    pub fn rate(&self, completed: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| e <= completed).count();
        self.base * self.factor.powi(passed as i32)
    }
}

/// Adam moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub schedule: LrSchedule,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(schedule: LrSchedule) -> Self {
        OptimizerState {
            schedule,
            ..Default::default()
        }
    }

    fn ensure_buffers(&mut self, params: &ParamStore) -> Result<()> {
        if self.first.is_empty() && self.step == 0 {
            self.first = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("adam_step", &[self.first.len()], &[params.len()]));
        }
        for ((_, name, t), m) in params.iter().zip(&self.first) {
            if m.len() != t.len() {
                return Err(Error::Contract(format!(
                    "moment buffer for `{name}` has {} entries, parameter has {}",
                    m.len(),
                    t.len()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter that holds a gradient.
pub fn adam_step(state: &mut OptimizerState, params: &mut ParamStore, lr: f64) -> Result<()> {
    state.ensure_buffers(params)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, (_, p)) in params.iter_mut().enumerate() {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}
