//! First-order optimizers over a [`ParameterStore`].

use std::collections::BTreeMap;

use crate::params::ParameterStore;
use crate::scalar::Scalar;

pub trait Optimizer<S: Scalar> {
    fn step(&mut self, store: &mut ParameterStore<S>);
    fn set_lr(&mut self, lr: f64);
}

pub struct Sgd {
    pub lr: f64,
}

impl<S: Scalar> Optimizer<S> for Sgd {
    fn step(&mut self, store: &mut ParameterStore<S>) {
        let lr = S::lit(self.lr);
        for (_, t) in store.iter_mut() {
            let Some(g) = t.grad().map(<[S]>::to_vec) else {
                continue;
            };
            for (w, gi) in t.data_mut().iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug)]
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
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter name.
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, store: &mut ParameterStore<S>) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::one() - b1.powi(self.step as i32);
        let bc2 = S::one() - b2.powi(self.step as i32);
        let lr = S::lit(c.lr);
        let eps = S::lit(c.eps);
        for (name, t) in store.iter_mut() {
            let Some(g) = t.grad().map(<[S]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![S::zero(); g.len()], vec![S::zero(); g.len()]));
            for (k, w) in t.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}
