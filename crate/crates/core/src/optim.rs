//! Adam with weight decay, and gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Group, Parameters};
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Shrink parameters directly by `lr * weight_decay` (AdamW).
    #[default]
    Decoupled,
    /// Add `weight_decay * p` to the gradient before the moment updates.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay_mode: WeightDecayMode::Decoupled,
        }
    }
}

/// Optimizer state, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every parameter in `groups`. Parameters without an entry
    /// in `grads` are treated as having a zero gradient.
    pub fn step(
        &mut self,
        params: &mut Parameters,
        groups: &[Group],
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            decay_mode,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for &group in groups {
            for (name, p) in params.group_mut(group).iter_mut() {
                let mut g = grads
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.raw_dim()));
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "gradient of {name} is {:?}, parameter is {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                match decay_mode {
                    WeightDecayMode::L2 if weight_decay > 0.0 => g.scaled_add(weight_decay, p),
                    WeightDecayMode::Decoupled if weight_decay > 0.0 => {
                        p.mapv_inplace(|v| v * (1.0 - lr * weight_decay))
                    }
                    _ => {}
                }
                let m = self
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                let v = self
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                ndarray::Zip::from(&mut *p)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    });
            }
        }
        Ok(())
    }
}

/// Rescales the gradients whose names start with `prefix` so that their
/// joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, prefix: &str, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for (_, g) in grads.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            g.mapv_inplace(|v| v * factor);
        }
    }
    norm
}
