//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{is_decay_exempt, Weights};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

/// Moment estimates for every trainable tensor, keyed by name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every trainable tensor:
    /// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`, with the decay term skipped
    /// for biases and batch-norm scale/shift.
    pub fn step(&mut self, weights: &mut Weights<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        let names: Vec<String> = weights.params().keys().cloned().collect();
        for name in &names {
            let n = weights.params()[name].numel();
            match grads.get(name) {
                None => return Err(Error::contract("adam_step", format!("no gradient for `{name}`"))),
                Some(g) if g.len() != n => {
                    return Err(Error::shape("adam_step", &[n], &[g.len()]));
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for name in names {
            let g = &grads[&name];
            let theta = weights.param_mut(&name).expect("listed above").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let decay = if is_decay_exempt(&name) {
                T::zero()
            } else {
                T::from_f64(c.lr * c.weight_decay)
            };
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                theta[i] = theta[i] - step_size * m[i] / denom - decay * theta[i];
            }
        }
        Ok(())
    }
}
