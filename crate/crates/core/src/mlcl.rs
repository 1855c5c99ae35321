//! Projection heads and the multi-level contrastive loss.
//!
//! For each contrastive level `p` a separate head maps the (globally
//! average-pooled) tap output to a 128-d vector, which is unit-normalised and
//! fed to an NT-Xent loss over the `2B` views of the batch. The multi-level
//! loss is the weighted sum of the per-level losses, unweighted by default.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TapMap, TapSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PROJECTION_DIM: usize = 128;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Cosine similarity `uᵀw / (‖u‖‖w‖)`.
pub fn cosine_similarity<T: Real>(u: &[T], w: &[T]) -> Result<f64> {
    if u.len() != w.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), w.len())));
    }
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let nu = u.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    let nw = w.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nw == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nu * nw)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over the `2B` anchors.
    #[default]
    Sum,
    /// Mean over the `2B` anchors.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Contrastive levels; empty disables the contrastive term.
    pub levels: Vec<usize>,
    /// One weight per level, or empty for all ones.
    pub level_weights: Vec<f64>,
    pub reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: DEFAULT_TEMPERATURE,
            levels: Vec::new(),
            level_weights: Vec::new(),
            reduction: Reduction::Sum,
        }
    }
}

impl ContrastiveConfig {
    pub fn with_levels(levels: &[usize]) -> Self {
        ContrastiveConfig {
            levels: levels.to_vec(),
            ..Default::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        !self.levels.is_empty()
    }

    /// Levels as a tap spec; fails when contrastive learning is disabled.
    pub fn tap_spec(&self) -> Result<TapSpec> {
        TapSpec::new(self.levels.clone())
    }

    pub fn weight(&self, idx: usize) -> f64 {
        self.level_weights.get(idx).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Temperature(self.temperature));
        }
        if !self.levels.is_empty() {
            TapSpec::new(self.levels.clone())?;
        }
        if !self.level_weights.is_empty() && self.level_weights.len() != self.levels.len() {
            return Err(Error::config(
                "level_weights",
                format!("{} weights for {} levels", self.level_weights.len(), self.levels.len()),
            ));
        }
        if let Some(w) = self.level_weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::config("level_weights", format!("weight {w} must be positive")));
        }
        Ok(())
    }
}

/// `Linear(c, c) → ReLU → Linear(c, 128)` on the pooled tap output.
#[derive(Debug, Clone)]
pub struct ProjectionHead<T> {
    level: usize,
    in_dim: usize,
    store: ParamStore<T>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<T: Real> ProjectionHead<T> {
    pub fn new(level: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w1 = store.add("fc1.weight", fan_in_uniform(&[in_dim, in_dim], in_dim, &mut rng));
        let b1 = store.add("fc1.bias", fan_in_uniform(&[in_dim], in_dim, &mut rng));
        let w2 = store.add("fc2.weight", fan_in_uniform(&[PROJECTION_DIM, in_dim], in_dim, &mut rng));
        let b2 = store.add("fc2.bias", fan_in_uniform(&[PROJECTION_DIM], in_dim, &mut rng));
        ProjectionHead {
            level,
            in_dim,
            store,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.in_dim
    }

    pub fn output_dim(&self) -> usize {
        PROJECTION_DIM
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Unit-norm projections for an `N×C×H×W` feature node.
    pub fn graph(&self, g: &mut Graph<T>, feature: Var) -> Result<Var> {
        let s = g.value(feature).shape();
        if s.len() != 4 || s[1] != self.in_dim {
            return Err(Error::Projection {
                level: self.level,
                reason: format!("expected N×{}×H×W features, got {s:?}", self.in_dim),
            });
        }
        let pooled = g.global_avg_pool(feature)?;
        let (w1, b1) = (g.param(&self.store, self.w1), g.param(&self.store, self.b1));
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(&self.store, self.w2), g.param(&self.store, self.b2));
        let z = g.linear(h, w2, Some(b2))?;
        g.l2_normalize(z).map_err(|e| match e {
            Error::ZeroVector => Error::Projection {
                level: self.level,
                reason: "projection is the zero vector".into(),
            },
            other => other,
        })
    }

    /// Projects a single `C×H×W` feature map or an `N×C×H×W` batch.
    pub fn project(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        let batched = match feature.shape().len() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(feature.shape());
                feature.clone().reshape(&s)?
            }
            _ => feature.clone(),
        };
        let mut g = Graph::new();
        let x = g.input(batched);
        let z = self.graph(&mut g, x)?;
        let out = g.value(z).clone();
        if feature.shape().len() == 3 {
            out.reshape(&[PROJECTION_DIM])
        } else {
            Ok(out)
        }
    }
}

/// Per-level NT-Xent over unit vectors `z` (`2B×D`, summed over anchors).
pub fn level_contrastive_loss<T: Real>(z: &Tensor<T>, pairing: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let l = g.nt_xent(zv, pairing, tau, false)?;
    Ok(g.value(l).item().as_f64())
}

/// Loss nodes for every configured level.
pub struct MlclNodes {
    pub total: Var,
    pub per_level: Vec<(usize, Var)>,
}

/// Builds `Σ_p w_p·L^p` on top of tap nodes of a `2B` interleaved batch.
pub fn mlcl_graph<T: Real>(
    g: &mut Graph<T>,
    taps: &BTreeMap<usize, Var>,
    heads: &BTreeMap<usize, ProjectionHead<T>>,
    config: &ContrastiveConfig,
    pairing: &[usize],
) -> Result<MlclNodes> {
    config.validate()?;
    if config.levels.is_empty() {
        return Err(Error::config("levels", "no contrastive levels configured"));
    }
    let mean = config.reduction == Reduction::Mean;
    let mut per_level = Vec::with_capacity(config.levels.len());
    let mut terms = Vec::with_capacity(config.levels.len());
    for (i, &level) in config.levels.iter().enumerate() {
        let head = heads.get(&level).ok_or(Error::MissingHead(level))?;
        let feat = *taps
            .get(&level)
            .ok_or_else(|| Error::TapSpec(format!("tap {level} missing from forward pass")))?;
        let z = head.graph(g, feat)?;
        let l = g.nt_xent(z, pairing, config.temperature, mean)?;
        per_level.push((level, l));
        terms.push((l, config.weight(i)));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(MlclNodes { total, per_level })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlclLoss {
    pub total: f64,
    pub per_level: Vec<(usize, f64)>,
}

/// Multi-level loss for a tap map of `2B` interleaved views.
pub fn mlcl_loss<T: Real>(
    tapmap: &TapMap<T>,
    heads: &BTreeMap<usize, ProjectionHead<T>>,
    config: &ContrastiveConfig,
) -> Result<MlclLoss> {
    let mut g = Graph::new();
    let mut vars = BTreeMap::new();
    let mut n = 0;
    for (&k, t) in tapmap {
        n = t.dim(0);
        vars.insert(k, g.input(t.clone()));
    }
    let pairing: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
    if n % 2 == 1 {
        return Err(Error::Pairing(n - 1));
    }
    let nodes = mlcl_graph(&mut g, &vars, heads, config, &pairing)?;
    Ok(MlclLoss {
        total: g.value(nodes.total).item().as_f64(),
        per_level: nodes
            .per_level
            .iter()
            .map(|&(l, v)| (l, g.value(v).item().as_f64()))
            .collect(),
    })
}
