//! Adam optimizer over named parameter sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tensor::{NamedTensors, Tensor};

/// Moment decay and epsilon constants; standard defaults, config-exposed.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates plus the shared time step.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Parameters without a gradient entry are treated as having
/// zero gradient (their moments decay toward zero; a fresh parameter stays
/// put). Iteration order is the ordered key order, so updates are
/// deterministic.
pub fn adam_step(
    params: &mut NamedTensors,
    grads: &NamedTensors,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in params.iter_mut() {
        let zero;
        let grad = match grads.get(name) {
            Some(g) => {
                if g.shape() != param.shape() {
                    return Err(Error::shape(
                        format!("adam_step param {name:?}"),
                        format!("{:?}", param.shape()),
                        format!("{:?}", g.shape()),
                    ));
                }
                g
            }
            None => {
                zero = Tensor::zeros(param.shape());
                &zero
            }
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
