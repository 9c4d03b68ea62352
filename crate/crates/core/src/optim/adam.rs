//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradientVector, ParamId, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One in-place update of `params`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at index {i}"
        )));
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over the flagged entries of a parameter set.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr_overrides: BTreeMap<ParamId, f64>,
    pub states: BTreeMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn with_lr(mut self, id: ParamId, lr: f64) -> Self {
        self.lr_overrides.insert(id, lr);
        self
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientVector) -> Result<()> {
        for (&id, g) in &grads.entries {
            if !params.is_flagged(id) {
                continue;
            }
            let mut v = params.values(id)?;
            let lr = self
                .lr_overrides
                .get(&id)
                .copied()
                .unwrap_or(self.config.lr);
            let state = self.states.entry(id).or_default();
            adam_step(&mut v, g, state, &self.config, lr)?;
            params.set_values(id, &v)?;
        }
        Ok(())
    }
}
