use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::param::{Param, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(NumError::Invalid(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(param: &Param, config: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(param.value.shape()),
            v: Tensor::zeros(param.value.shape()),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update; clears the gradient afterwards.
pub fn adam_step(param: &mut Param, state: &mut AdamState) {
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let grad = param.grad.data_mut();
    for (i, (x, g)) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(grad.iter_mut())
        .enumerate()
    {
        m[i] = beta1 * m[i] + (1.0 - beta1) * *g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * *g * *g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
        *g = 0.0;
    }
}

/// Adam over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            states: store.iter().map(|p| AdamState::new(p, config)).collect(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for (p, s) in store.iter_mut().zip(&mut self.states) {
            adam_step(p, s);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: f64) -> Param {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x));
        store.get_mut(id).grad = Tensor::scalar(g);
        store.get(id).clone()
    }

    #[test]
    fn first_step_is_normalised_gradient() {
        let cfg = AdamConfig::with_lr(0.01);
        for g in [3.0, -0.2, 1e-3] {
            let mut p = scalar_param(1.0, g);
            let mut s = AdamState::new(&p, cfg);
            adam_step(&mut p, &mut s);
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p.value.item() - expected).abs() < 1e-12);
            assert_eq!(p.grad.item(), 0.0);
            assert_eq!(s.step_count, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = scalar_param(0.7, 0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut p, &mut s);
        }
        assert_eq!(p.value.item(), 0.7);
        assert_eq!(s.m.item(), 0.0);
        assert_eq!(s.v.item(), 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let store = ParamStore::new();
        assert!(Adam::new(&store, AdamConfig::with_lr(0.0)).is_err());
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(&store, bad).is_err());
    }
}
