//! SGD with (Nesterov) momentum and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate for `step` out of `total` (cosine decays to zero at `total`).
    pub fn lr(&self, initial: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => initial,
            Schedule::Cosine if total == 0 => initial,
            Schedule::Cosine => {
                let t = (step.min(total) as f64) / total as f64;
                0.5 * initial * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum buffers for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(len: usize) -> Self {
        SgdState {
            velocity: vec![None; len],
        }
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, config: &SgdConfig, lr: f64) {
        let (lr, mu, wd) = (T::lit(lr), T::lit(config.momentum), T::lit(config.weight_decay));
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.slots().get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let p = entry.value.data_mut();
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape())).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                let upd = if config.nesterov { d + mu * *v } else { *v };
                *p -= lr * upd;
            }
        }
    }
}
