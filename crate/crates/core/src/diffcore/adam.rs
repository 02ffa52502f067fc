use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.eps);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for (name, p) in params.values_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
