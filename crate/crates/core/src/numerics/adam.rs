use std::collections::BTreeMap;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry
    /// are left untouched; every supplied gradient must be finite.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    shapes: format!("{name}: {} vs {}", p.shape_str(), g.shape_str()),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let frozen = params.frozen_rows(name).to_vec();
            let p = params.get_mut(name)?;
            let cols = p.cols();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let pd = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                if !frozen.is_empty() && frozen.binary_search(&(j / cols)).is_ok() {
                    continue;
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
