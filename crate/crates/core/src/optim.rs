//! Adaptive moment estimation.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Adam { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid("adam", "gradient, state and store sizes differ"));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ib1, ib2) = (T::ONE - b1, T::ONE - b2);
        let step = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pj, mj), vj), &gj) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *mj = b1 * *mj + ib1 * gj;
                *vj = b2 * *vj + ib2 * gj * gj;
                *pj -= step * *mj / ((*vj * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
