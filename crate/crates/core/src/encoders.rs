//! Residual convolutional encoders with tap points.
//!
//! Taps number the block-level convolution outputs from the input upwards,
//! starting at 1. In a basic block the first convolution's tap is taken after
//! batch-norm and ReLU; the second after the residual addition and the final
//! ReLU. The stem convolution is layer 0 and cannot be tapped, and the 1×1
//! projection shortcuts are not counted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::kernels::conv_out;
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionConfig {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub name: String,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_channels: usize,
    #[serde(default = "default_stride")]
    pub stem_stride: usize,
    pub sections: Vec<SectionConfig>,
    pub input_size: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

impl EncoderConfig {
    pub const PRESETS: [&'static str; 4] = ["resnet18", "resnet18-v1", "resnet18-v2", "small"];

    pub fn preset(name: &str) -> Result<Self> {
        let s = |blocks, channels, stride| SectionConfig {
            blocks,
            channels,
            stride,
        };
        let (stem, stem_stride, sections, input) = match name {
            "resnet18" => (
                64,
                1,
                vec![s(2, 64, 1), s(2, 128, 2), s(2, 256, 2), s(2, 512, 2)],
                80,
            ),
            "resnet18-v1" => (64, 1, vec![s(3, 64, 1), s(3, 128, 2), s(3, 256, 2)], 80),
            "resnet18-v2" => (64, 1, vec![s(4, 64, 2), s(4, 128, 2)], 80),
            "small" => (16, 2, vec![s(2, 16, 1), s(2, 32, 2)], 32),
            other => {
                return Err(Error::config(
                    "encoder",
                    format!("unknown preset {other:?}; known: {}", Self::PRESETS.join(", ")),
                ))
            }
        };
        Ok(EncoderConfig {
            name: name.to_string(),
            in_channels: 3,
            stem_channels: stem,
            stem_stride,
            sections,
            input_size: input,
        })
    }

    /// Copy with a different input resolution.
    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sections.is_empty() {
            return Err(Error::config("sections", "at least one residual section is required"));
        }
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("stem_channels", self.stem_channels),
            ("stem_stride", self.stem_stride),
            ("input_size", self.input_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (i, s) in self.sections.iter().enumerate() {
            for (field, v) in [("blocks", s.blocks), ("channels", s.channels), ("stride", s.stride)] {
                if v == 0 {
                    return Err(Error::config(format!("sections[{i}].{field}"), "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.sections.iter().map(|s| s.blocks).sum()
    }

    /// Tappable layers: two per basic block.
    pub fn tap_count(&self) -> usize {
        2 * self.block_count()
    }

    /// All convolutional layers on the main path, stem included.
    pub fn conv_layer_count(&self) -> usize {
        self.tap_count() + 1
    }

    fn block_plan(&self) -> Vec<BlockPlan> {
        let mut plan = Vec::new();
        let mut in_ch = self.stem_channels;
        for (si, s) in self.sections.iter().enumerate() {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                plan.push(BlockPlan {
                    name: format!("s{si}.b{b}"),
                    in_ch,
                    out_ch: s.channels,
                    stride,
                });
                in_ch = s.channels;
            }
        }
        plan
    }
}

struct BlockPlan {
    name: String,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
}

/// Output shape of one tap for a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapInfo {
    pub index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TapInfo {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Every tap of `config` with its output shape, by stride arithmetic.
pub fn list_taps(config: &EncoderConfig) -> Vec<TapInfo> {
    let mut side = conv_out(config.input_size, 3, config.stem_stride, 1);
    let mut out = Vec::with_capacity(config.tap_count());
    for (b, blk) in config.block_plan().iter().enumerate() {
        side = conv_out(side, 3, blk.stride, 1);
        for k in 1..=2 {
            out.push(TapInfo {
                index: 2 * b + k,
                channels: blk.out_ch,
                height: side,
                width: side,
            });
        }
    }
    out
}

/// Strictly increasing, non-empty list of tap indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TapSpec(Vec<usize>);

impl TapSpec {
    pub fn new(taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::TapSpec("empty tap list".into()));
        }
        if taps[0] == 0 {
            return Err(Error::TapSpec("taps are numbered from 1; 0 is the stem".into()));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::TapSpec(format!("{taps:?} is not strictly increasing")));
        }
        Ok(TapSpec(taps))
    }

    pub fn single(tap: usize) -> Result<Self> {
        Self::new(vec![tap])
    }

    /// Union of two specs.
    pub fn union(&self, other: &TapSpec) -> TapSpec {
        let mut v: Vec<usize> = self.0.iter().chain(&other.0).copied().collect();
        v.sort_unstable();
        v.dedup();
        TapSpec(v)
    }

    pub fn taps(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let max = config.tap_count();
        match self.0.iter().find(|&&t| t > max) {
            Some(&tap) => Err(Error::TapOutOfRange { tap, max }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<usize>> for TapSpec {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        TapSpec::new(v)
    }
}

impl From<TapSpec> for Vec<usize> {
    fn from(t: TapSpec) -> Self {
        t.0
    }
}

impl fmt::Display for TapSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for TapSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let taps = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::TapSpec(format!("{s:?}: {e}")))?;
        TapSpec::new(taps)
    }
}

/// Batched feature maps keyed by tap index; each tensor is `N×C×H×W`.
pub type TapMap<T> = BTreeMap<usize, Tensor<T>>;

/// Whether batch-norm uses batch statistics (training) or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    conv1: ParamId,
    bn1: BnIds,
    conv2: ParamId,
    bn2: BnIds,
    shortcut: Option<(ParamId, BnIds)>,
    stride: usize,
}

/// Statistics from a training-mode pass, one per batch-norm layer visited.
pub struct BnUpdates<T>(Vec<(BnIds, BatchStats<T>)>);

/// A residual encoder and its parameters.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    store: ParamStore<T>,
    stem_conv: ParamId,
    stem_bn: BnIds,
    blocks: Vec<BlockIds>,
}

fn add_bn<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> BnIds {
    BnIds {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
        var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one())),
    }
}

/// Builds an encoder with He-initialised convolutions drawn from `seed`.
pub fn build_encoder<T: Real>(config: &EncoderConfig, seed: u64) -> Result<Encoder<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (cin, stem) = (config.in_channels, config.stem_channels);
    let stem_conv = store.add("stem.conv", kaiming_normal(&[stem, cin, 3, 3], cin * 9, &mut rng));
    let stem_bn = add_bn(&mut store, "stem.bn", stem);
    let mut blocks = Vec::new();
    for p in config.block_plan() {
        let conv1 = store.add(
            format!("{}.conv1", p.name),
            kaiming_normal(&[p.out_ch, p.in_ch, 3, 3], p.in_ch * 9, &mut rng),
        );
        let bn1 = add_bn(&mut store, &format!("{}.bn1", p.name), p.out_ch);
        let conv2 = store.add(
            format!("{}.conv2", p.name),
            kaiming_normal(&[p.out_ch, p.out_ch, 3, 3], p.out_ch * 9, &mut rng),
        );
        let bn2 = add_bn(&mut store, &format!("{}.bn2", p.name), p.out_ch);
        let shortcut = (p.stride != 1 || p.in_ch != p.out_ch).then(|| {
            let w = store.add(
                format!("{}.shortcut", p.name),
                kaiming_normal(&[p.out_ch, p.in_ch, 1, 1], p.in_ch, &mut rng),
            );
            (w, add_bn(&mut store, &format!("{}.shortcut_bn", p.name), p.out_ch))
        });
        blocks.push(BlockIds {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            stride: p.stride,
        });
    }
    Ok(Encoder {
        config: config.clone(),
        store,
        stem_conv,
        stem_bn,
        blocks,
    })
}

impl<T: Real> Encoder<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn top_tap(&self) -> usize {
        self.config.tap_count()
    }

    fn bn(&self, g: &mut Graph<T>, x: Var, ids: BnIds, mode: Mode, stats: &mut Vec<(BnIds, BatchStats<T>)>) -> Result<Var> {
        let gamma = g.param(&self.store, ids.gamma);
        let beta = g.param(&self.store, ids.beta);
        match mode {
            Mode::Train => {
                let (y, s) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                stats.push((ids, s));
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.store.get(ids.mean).data(),
                self.store.get(ids.var).data(),
                BN_EPS,
            ),
        }
    }

    /// Records the requested taps while building the forward graph. Layers
    /// above the highest requested tap are not evaluated.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, taps: &TapSpec, mode: Mode) -> Result<(BTreeMap<usize, Var>, BnUpdates<T>)> {
        taps.check(&self.config)?;
        let s = g.value(x).shape();
        let want = [self.config.in_channels, self.config.input_size, self.config.input_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Shape(format!(
                "encoder {} expects N×{}×{}×{} input, got {s:?}",
                self.config.name, want[0], want[1], want[2]
            )));
        }
        let mut stats = Vec::new();
        let mut out = BTreeMap::new();
        let w = g.param(&self.store, self.stem_conv);
        let h = g.conv2d(x, w, self.config.stem_stride, 1)?;
        let h = self.bn(g, h, self.stem_bn, mode, &mut stats)?;
        let mut h = g.relu(h);
        let top = taps.max();
        for (b, blk) in self.blocks.iter().enumerate() {
            let first_tap = 2 * b + 1;
            if first_tap > top {
                break;
            }
            let w1 = g.param(&self.store, blk.conv1);
            let a = g.conv2d(h, w1, blk.stride, 1)?;
            let a = self.bn(g, a, blk.bn1, mode, &mut stats)?;
            let a = g.relu(a);
            if taps.taps().contains(&first_tap) {
                out.insert(first_tap, a);
            }
            if first_tap + 1 > top {
                break;
            }
            let w2 = g.param(&self.store, blk.conv2);
            let c = g.conv2d(a, w2, 1, 1)?;
            let c = self.bn(g, c, blk.bn2, mode, &mut stats)?;
            let skip = match blk.shortcut {
                Some((ws, bn)) => {
                    let wv = g.param(&self.store, ws);
                    let sc = g.conv2d(h, wv, blk.stride, 0)?;
                    self.bn(g, sc, bn, mode, &mut stats)?
                }
                None => h,
            };
            let sum = g.add(c, skip)?;
            h = g.relu(sum);
            if taps.taps().contains(&(first_tap + 1)) {
                out.insert(first_tap + 1, h);
            }
        }
        Ok((out, BnUpdates(stats)))
    }

    /// Inference pass (running batch-norm statistics) returning the
    /// requested feature maps.
    pub fn forward_with_taps(&self, batch: &Tensor<T>, taps: &TapSpec) -> Result<TapMap<T>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let (vars, _) = self.forward_graph(&mut g, x, taps, Mode::Eval)?;
        Ok(vars.into_iter().map(|(k, v)| (k, g.value(v).clone())).collect())
    }

    /// Top-layer output of an inference pass.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let top = self.top_tap();
        let mut m = self.forward_with_taps(batch, &TapSpec::single(top)?)?;
        Ok(m.remove(&top).expect("top tap requested"))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: BnUpdates<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (ids, s) in updates.0 {
            for (r, &b) in self.store.get_mut(ids.mean).data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.store.get_mut(ids.var).data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }

    /// Rebuilds an encoder from a config and stored values.
    pub fn from_values(config: &EncoderConfig, values: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut enc = build_encoder(config, 0)?;
        enc.store.load_values(values)?;
        Ok(enc)
    }
}
