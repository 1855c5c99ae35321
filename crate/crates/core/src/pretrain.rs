//! Joint supervised + multi-level contrastive pretraining.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_contrastive_batch, AugmentConfig, Image};
use crate::checkpoint::{fingerprint_of, Container};
use crate::derived_rng;
use crate::encoders::{build_encoder, BnUpdates, Encoder, EncoderConfig, Mode, TapSpec};
use crate::episodes::{images_to_batch, LabeledClass};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlcl::{mlcl_graph, ContrastiveConfig, MlclNodes, ProjectionHead};
use crate::optim::{Schedule, SgdConfig, SgdState};
use crate::params::{fan_in_uniform, Grads, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

const ORDER_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const HEAD_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub schedule: Schedule,
    pub sgd: SgdConfig,
    pub ce_weight: f64,
    pub mlcl_weight: f64,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 256,
            initial_lr: 0.05,
            schedule: Schedule::Cosine,
            sgd: SgdConfig {
                weight_decay: 5e-4,
                ..SgdConfig::default()
            },
            ce_weight: 1.0,
            mlcl_weight: 1.0,
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", format!("{} < 2", self.batch_size)));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("initial_lr", format!("{} must be positive", self.initial_lr)));
        }
        for (name, w) in [("ce_weight", self.ce_weight), ("mlcl_weight", self.mlcl_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, format!("{w} must be non-negative")));
            }
        }
        self.sgd.validate()?;
        self.contrastive.validate()?;
        self.augment.validate()
    }

    /// Taps the forward pass must expose: the contrastive levels plus the top.
    pub fn forward_taps(&self, encoder: &EncoderConfig) -> Result<TapSpec> {
        let top = TapSpec::single(encoder.tap_count())?;
        if self.contrastive.is_enabled() {
            let levels = self.contrastive.tap_spec()?;
            levels.check(encoder)?;
            Ok(levels.union(&top))
        } else {
            Ok(top)
        }
    }
}

/// Linear classifier over the pooled top-layer representation.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub store: ParamStore<T>,
    w: ParamId,
    b: ParamId,
}

impl<T: Real> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let w = store.add("weight", fan_in_uniform(&[classes, in_dim], in_dim, rng));
        let b = store.add("bias", fan_in_uniform(&[classes], in_dim, rng));
        Classifier { store, w, b }
    }

    pub fn classes(&self) -> usize {
        self.store.get(self.w).dim(0)
    }

    pub fn graph(&self, g: &mut Graph<T>, top: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(top)?;
        let (w, b) = (g.param(&self.store, self.w), g.param(&self.store, self.b));
        g.linear(pooled, w, Some(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub ce: f64,
    pub levels: Vec<(usize, f64)>,
    pub mlcl: f64,
    pub total: f64,
    pub lr: f64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub encoder: Encoder<T>,
    pub heads: BTreeMap<usize, ProjectionHead<T>>,
    pub classifier: Classifier<T>,
    pub optim: BTreeMap<String, SgdState<T>>,
    pub step: u64,
    pub total_steps: u64,
    pub history: Vec<StepRecord>,
}

fn head_group(level: usize) -> String {
    format!("head.{level}")
}

impl<T: Real> TrainState<T> {
    /// Fresh state; all initialisation is derived from `config.seed`.
    pub fn new(encoder_config: &EncoderConfig, classes: usize, config: &PretrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = build_encoder(encoder_config, config.seed)?;
        let taps = crate::encoders::list_taps(encoder_config);
        let mut heads = BTreeMap::new();
        for &level in &config.contrastive.levels {
            let info = taps.get(level.wrapping_sub(1)).ok_or(Error::TapOutOfRange {
                tap: level,
                max: taps.len(),
            })?;
            let seed = derived_rng(config.seed, HEAD_STREAM, level as u64).random();
            heads.insert(level, ProjectionHead::new(level, info.channels, seed));
        }
        let top = taps.last().expect("validated encoder has taps").channels;
        let classifier = Classifier::new(top, classes, &mut derived_rng(config.seed, HEAD_STREAM, 0));
        let mut state = TrainState {
            encoder,
            heads,
            classifier,
            optim: BTreeMap::new(),
            step: 0,
            total_steps: 0,
            history: Vec::new(),
        };
        for (name, len) in state.groups().map(|(n, s)| (n, s.len())).collect::<Vec<_>>() {
            state.optim.insert(name, SgdState::new(len));
        }
        Ok(state)
    }

    /// Parameter stores with their checkpoint group names, in fixed order.
    pub fn groups(&self) -> impl Iterator<Item = (String, &ParamStore<T>)> {
        std::iter::once(("encoder".to_string(), self.encoder.store()))
            .chain(self.heads.iter().map(|(l, h)| (head_group(*l), h.store())))
            .chain(std::iter::once(("classifier".to_string(), &self.classifier.store)))
    }
}

/// `ce_weight·CE(logits, labels) + mlcl_weight·mlcl_value`.
pub fn total_loss<T: Real>(logits: &Tensor<T>, labels: &[usize], mlcl_value: f64, config: &PretrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let ce = g.cross_entropy(l, labels)?;
    Ok(config.ce_weight * g.value(ce).item().as_f64() + config.mlcl_weight * mlcl_value)
}

/// Gradients for every store of a [`TrainState`].
pub struct StateGrads<T> {
    pub encoder: Grads<T>,
    pub heads: BTreeMap<usize, Grads<T>>,
    pub classifier: Grads<T>,
}

/// The forward graph of one training step on an already augmented batch.
pub struct StepGraph<T> {
    pub graph: Graph<T>,
    pub total: Var,
    pub ce: Var,
    pub mlcl: Option<MlclNodes>,
    bn: BnUpdates<T>,
}

impl<T: Real> StepGraph<T> {
    pub fn value(&self, v: Var) -> f64 {
        self.graph.value(v).item().as_f64()
    }

    pub fn record(&self, step: u64, lr: f64) -> StepRecord {
        let levels: Vec<(usize, f64)> = self
            .mlcl
            .as_ref()
            .map(|m| m.per_level.iter().map(|&(l, v)| (l, self.value(v))).collect())
            .unwrap_or_default();
        StepRecord {
            step,
            ce: self.value(self.ce),
            mlcl: self.mlcl.as_ref().map_or(0.0, |m| self.value(m.total)),
            levels,
            total: self.value(self.total),
            lr,
        }
    }

    /// Gradients of `root` (the total loss or any node of it).
    pub fn gradients(&self, state: &TrainState<T>, root: Var) -> StateGrads<T> {
        let g = self.graph.backward(root);
        StateGrads {
            encoder: g.for_store(state.encoder.store()),
            heads: state.heads.iter().map(|(l, h)| (*l, g.for_store(h.store()))).collect(),
            classifier: g.for_store(&state.classifier.store),
        }
    }
}

/// Builds the loss graph for `views` (`2B` interleaved views, `view_labels`
/// one per view) in training mode.
pub fn build_step_graph<T: Real>(
    state: &TrainState<T>,
    views: Tensor<T>,
    view_labels: &[usize],
    config: &PretrainConfig,
) -> Result<StepGraph<T>> {
    let n = views.dim(0);
    if view_labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} views", view_labels.len())));
    }
    let taps = config.forward_taps(state.encoder.config())?;
    let mut g = Graph::new();
    let x = g.input(views);
    let (vars, bn) = state.encoder.forward_graph(&mut g, x, &taps, Mode::Train)?;
    let top = vars[&taps.max()];
    let logits = state.classifier.graph(&mut g, top)?;
    let ce = g.cross_entropy(logits, view_labels)?;
    let mlcl = if config.contrastive.is_enabled() {
        let pairing: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
        Some(mlcl_graph(&mut g, &vars, &state.heads, &config.contrastive, &pairing)?)
    } else {
        None
    };
    let mut terms = vec![(ce, config.ce_weight)];
    if let Some(m) = &mlcl {
        terms.push((m.total, config.mlcl_weight));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(StepGraph {
        graph: g,
        total,
        ce,
        mlcl,
        bn,
    })
}

/// Augments `images` into two views each and stacks them for the network.
pub fn prepare_views<T: Real, R: Rng + ?Sized>(
    images: &[&Image],
    labels: &[usize],
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images with {} labels", images.len(), labels.len())));
    }
    let batch = make_contrastive_batch(images, config, rng)?;
    let refs: Vec<&Image> = batch.views.iter().collect();
    let x = images_to_batch(&refs)?;
    let view_labels = labels.iter().flat_map(|&l| [l, l]).collect();
    Ok((x, view_labels))
}

/// One optimisation step on a batch of source images.
pub fn pretrain_step<T: Real, R: Rng + ?Sized>(
    state: &mut TrainState<T>,
    images: &[&Image],
    labels: &[usize],
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    if images.len() != config.batch_size {
        return Err(Error::Shape(format!(
            "batch of {} images, config expects {}",
            images.len(),
            config.batch_size
        )));
    }
    let (x, view_labels) = prepare_views::<T, R>(images, labels, &config.augment, rng)?;
    let lr = config.schedule.lr(config.initial_lr, state.step, state.total_steps);
    let sg = build_step_graph(state, x, &view_labels, config)?;
    let rec = sg.record(state.step, lr);
    if !rec.total.is_finite() || !rec.ce.is_finite() || rec.levels.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            ce: rec.ce,
            levels: rec.levels,
            total: rec.total,
        });
    }
    let grads = sg.gradients(state, sg.total);
    let StepGraph { bn, .. } = sg;
    let sgd = config.sgd;
    let opt = &mut state.optim;
    opt.get_mut("encoder")
        .expect("encoder optimizer")
        .step(state.encoder.store_mut(), &grads.encoder, &sgd, lr);
    for (level, head) in state.heads.iter_mut() {
        let name = head_group(*level);
        opt.get_mut(&name).expect("head optimizer").step(head.store_mut(), &grads.heads[level], &sgd, lr);
    }
    opt.get_mut("classifier")
        .expect("classifier optimizer")
        .step(&mut state.classifier.store, &grads.classifier, &sgd, lr);
    state.encoder.apply_bn_updates(bn);
    state.step += 1;
    state.history.push(rec.clone());
    Ok(rec)
}

/// Steps per epoch when every epoch visits each image at most once.
pub fn steps_per_epoch(images: usize, batch: usize) -> u64 {
    (images / batch.max(1)) as u64
}

fn flat_index(classes: &[LabeledClass]) -> Vec<(usize, usize)> {
    classes
        .iter()
        .enumerate()
        .flat_map(|(c, cl)| (0..cl.images.len()).map(move |i| (c, i)))
        .collect()
}

/// Fresh state followed by [`continue_pretrain`] to the end of the schedule.
pub fn pretrain<T: Real>(
    config: &PretrainConfig,
    encoder_config: &EncoderConfig,
    classes: &[LabeledClass],
    observer: &mut dyn FnMut(&TrainState<T>, &StepRecord) -> Result<()>,
) -> Result<TrainState<T>> {
    if classes.is_empty() || classes.iter().all(|c| c.images.is_empty()) {
        return Err(Error::Dataset("pretraining needs at least one labelled training image".into()));
    }
    let mut state = TrainState::new(encoder_config, classes.len(), config)?;
    continue_pretrain(&mut state, config, classes, None, observer)?;
    Ok(state)
}

/// Runs steps from `state.step` until the schedule ends (or `until`). The
/// image order of each epoch and the augmentation of each step depend only on
/// the seed and their index, so an interrupted run resumes exactly.
pub fn continue_pretrain<T: Real>(
    state: &mut TrainState<T>,
    config: &PretrainConfig,
    classes: &[LabeledClass],
    until: Option<u64>,
    observer: &mut dyn FnMut(&TrainState<T>, &StepRecord) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    let index = flat_index(classes);
    if index.len() < config.batch_size && config.epochs > 0 {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training images", config.batch_size, index.len()),
        ));
    }
    let spe = steps_per_epoch(index.len(), config.batch_size);
    state.total_steps = spe * config.epochs as u64;
    let end = until.map_or(state.total_steps, |u| u.min(state.total_steps));
    let mut order: Option<(u64, Vec<(usize, usize)>)> = None;
    while state.step < end {
        let epoch = state.step / spe;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut o = index.clone();
            o.shuffle(&mut derived_rng(config.seed, ORDER_STREAM, epoch));
            order = Some((epoch, o));
        }
        let o = &order.as_ref().unwrap().1;
        let at = (state.step % spe) as usize * config.batch_size;
        let picks = &o[at..at + config.batch_size];
        let images: Vec<&Image> = picks.iter().map(|&(c, i)| &classes[c].images[i]).collect();
        let labels: Vec<usize> = picks.iter().map(|&(c, _)| c).collect();
        let mut rng = derived_rng(config.seed, STEP_STREAM, state.step);
        let rec = pretrain_step(state, &images, &labels, config, &mut rng)?;
        log::debug!("step {} ce {:.4} mlcl {:.4} total {:.4}", rec.step, rec.ce, rec.mlcl, rec.total);
        observer(state, &rec)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainMeta {
    kind: String,
    encoder: EncoderConfig,
    pretrain: PretrainConfig,
    classes: usize,
    step: u64,
    total_steps: u64,
    history: Vec<StepRecord>,
    config_fingerprint: String,
    encoder_fingerprint: String,
}

/// Fingerprint of the configuration that produced a checkpoint.
pub fn config_fingerprint(encoder: &EncoderConfig, config: &PretrainConfig) -> Result<String> {
    fingerprint_of(&(encoder, config))
}

pub fn save_train_state<T: Real>(path: &Path, state: &TrainState<T>, config: &PretrainConfig) -> Result<()> {
    let meta = PretrainMeta {
        kind: "pretrain".into(),
        encoder: state.encoder.config().clone(),
        pretrain: config.clone(),
        classes: state.classifier.classes(),
        step: state.step,
        total_steps: state.total_steps,
        history: state.history.clone(),
        config_fingerprint: config_fingerprint(state.encoder.config(), config)?,
        encoder_fingerprint: state.encoder.fingerprint(),
    };
    let mut c = Container::new(serde_json::to_value(&meta)?);
    for (name, store) in state.groups() {
        c.push_store(&name, store);
    }
    for (name, store) in state.groups() {
        c.push_optimizer(&name, store, &state.optim[&name]);
    }
    c.save(path)
}

/// Loads a state and the configuration it was trained with.
pub fn load_train_state<T: Real>(path: &Path) -> Result<(TrainState<T>, PretrainConfig)> {
    let c = Container::load(path)?;
    let meta: PretrainMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != "pretrain" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a pretraining checkpoint, found '{}'", meta.kind),
        });
    }
    let mut state = TrainState::new(&meta.encoder, meta.classes, &meta.pretrain)?;
    state.encoder.store_mut().load_values(&c.group("encoder")?)?;
    for (level, head) in state.heads.iter_mut() {
        head.store_mut().load_values(&c.group(&head_group(*level))?)?;
    }
    state.classifier.store.load_values(&c.group("classifier")?)?;
    let names: Vec<String> = state.groups().map(|(n, _)| n).collect();
    for name in names {
        let store = state.groups().find(|(n, _)| *n == name).map(|(_, s)| s).unwrap();
        let opt = c.load_optimizer(&name, store)?;
        state.optim.insert(name, opt);
    }
    state.step = meta.step;
    state.total_steps = meta.total_steps;
    state.history = meta.history;
    if state.encoder.fingerprint() != meta.encoder_fingerprint {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "encoder fingerprint mismatch".into(),
        });
    }
    Ok((state, meta.pretrain))
}

/// Reads only the encoder from a pretraining checkpoint.
pub fn load_encoder<T: Real>(path: &Path) -> Result<(Encoder<T>, String)> {
    let c = Container::load(path)?;
    let meta: PretrainMeta = serde_json::from_value(c.meta.clone())?;
    let enc = Encoder::from_values(&meta.encoder, &c.group("encoder")?)?;
    Ok((enc, meta.config_fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::SectionConfig;
    use crate::tensor::bitwise_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            name: "tiny".into(),
            in_channels: 3,
            stem_channels: 4,
            stem_stride: 1,
            sections: vec![
                SectionConfig {
                    blocks: 1,
                    channels: 4,
                    stride: 1,
                },
                SectionConfig {
                    blocks: 1,
                    channels: 6,
                    stride: 2,
                },
            ],
            input_size: 8,
        }
    }

    fn toy_classes(n: usize, per: usize, size: usize) -> Vec<LabeledClass> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..n)
            .map(|c| LabeledClass {
                name: format!("k{c}"),
                images: (0..per)
                    .map(|_| {
                        let d = (0..3 * size * size)
                            .map(|i| {
                                let ch = i / (size * size);
                                let base = if ch == c % 3 { 0.8 } else { 0.2 };
                                (base + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0)
                            })
                            .collect();
                        Tensor::from_vec(&[3, size, size], d).unwrap()
                    })
                    .collect(),
            })
            .collect()
    }

    fn config(levels: &[usize]) -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            batch_size: 4,
            initial_lr: 0.01,
            contrastive: ContrastiveConfig::with_levels(levels),
            ..Default::default()
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let l = total_loss(&logits, &[0, 4, 9], 0.0, &PretrainConfig::default()).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.3026).abs() < 1e-4);
        let mut sure = Tensor::<f64>::zeros(&[1, 3]);
        sure.data_mut()[1] = 800.0;
        let l = total_loss(&sure, &[1], 1.5, &PretrainConfig::default()).unwrap();
        assert_eq!(l, 1.5);
        assert!(matches!(total_loss(&sure, &[3], 0.0, &PretrainConfig::default()), Err(Error::Label { .. })));
    }

    #[test]
    fn zero_lr_step_keeps_parameters() {
        let classes = toy_classes(3, 4, 8);
        let mut cfg = config(&[2, 4]);
        cfg.initial_lr = 0.0;
        let mut st = TrainState::<f64>::new(&tiny_config(), 3, &PretrainConfig { initial_lr: 1.0, ..cfg.clone() }).unwrap();
        let before: Vec<String> = st.groups().map(|(_, s)| {
            s.entries().iter().filter(|e| e.trainable).map(|e| format!("{:?}", e.value.data())).collect()
        }).collect();
        let imgs: Vec<&Image> = classes.iter().flat_map(|c| &c.images).take(4).collect();
        pretrain_step(&mut st, &imgs, &[0, 0, 0, 0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let after: Vec<String> = st.groups().map(|(_, s)| {
            s.entries().iter().filter(|e| e.trainable).map(|e| format!("{:?}", e.value.data())).collect()
        }).collect();
        assert_eq!(before, after);
        assert_eq!(st.step, 1);
        assert_eq!(st.history.len(), 1);
    }

    #[test]
    fn logged_total_decomposes() {
        let classes = toy_classes(3, 4, 8);
        let mut cfg = config(&[2, 3, 4]);
        cfg.ce_weight = 0.7;
        cfg.mlcl_weight = 1.3;
        let st = pretrain::<f64>(&cfg, &tiny_config(), &classes, &mut |_, _| Ok(())).unwrap();
        assert_eq!(st.history.len() as u64, st.step);
        assert_eq!(st.step, 6);
        for (i, r) in st.history.iter().enumerate() {
            assert_eq!(r.step, i as u64);
            let sum: f64 = r.levels.iter().map(|l| l.1).sum();
            let expect = 0.7 * r.ce + 1.3 * sum;
            assert!((r.total - expect).abs() <= 1e-6 * expect.abs());
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let classes = toy_classes(3, 4, 8);
        let run = || pretrain::<f32>(&config(&[4]), &tiny_config(), &classes, &mut |_, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        let bits = |s: &TrainState<f32>| s.history.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.encoder.fingerprint(), b.encoder.fingerprint());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let classes = toy_classes(3, 4, 8);
        let mut cfg = config(&[4]);
        cfg.epochs = 0;
        let st = pretrain::<f32>(&cfg, &tiny_config(), &classes, &mut |_, _| Ok(())).unwrap();
        let init = TrainState::<f32>::new(&tiny_config(), 3, &cfg).unwrap();
        assert_eq!(st.encoder.fingerprint(), init.encoder.fingerprint());
        assert!(matches!(
            pretrain::<f32>(&cfg, &tiny_config(), &[], &mut |_, _| Ok(())),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let classes = toy_classes(3, 4, 8);
        let cfg = config(&[3, 4]);
        let full = pretrain::<f32>(&cfg, &tiny_config(), &classes, &mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut st = TrainState::<f32>::new(&tiny_config(), 3, &cfg).unwrap();
        continue_pretrain(&mut st, &cfg, &classes, Some(2), &mut |_, _| Ok(())).unwrap();
        save_train_state(&path, &st, &cfg).unwrap();
        let (mut st, cfg2) = load_train_state::<f32>(&path).unwrap();
        assert_eq!(cfg, cfg2);
        continue_pretrain(&mut st, &cfg2, &classes, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(st.history, full.history);
        assert_eq!(st.encoder.fingerprint(), full.encoder.fingerprint());
    }

    #[test]
    fn checkpoint_reproduces_tapmaps() {
        let classes = toy_classes(3, 4, 8);
        let cfg = config(&[4]);
        let st = pretrain::<f32>(&cfg, &tiny_config(), &classes, &mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_train_state(&path, &st, &cfg).unwrap();
        let (enc, _) = load_encoder::<f32>(&path).unwrap();
        let imgs: Vec<&Image> = classes[0].images.iter().collect();
        let x: Tensor<f32> = images_to_batch(&imgs).unwrap();
        let taps = TapSpec::new(vec![1, 2, 3, 4]).unwrap();
        let a = st.encoder.forward_with_taps(&x, &taps).unwrap();
        let b = enc.forward_with_taps(&x, &taps).unwrap();
        assert!(a.iter().zip(&b).all(|((ka, ta), (kb, tb))| ka == kb && bitwise_eq(ta, tb)));
    }

    #[test]
    fn non_finite_loss_reports_components() {
        let classes = toy_classes(3, 4, 8);
        let cfg = config(&[4]);
        let mut st = TrainState::<f32>::new(&tiny_config(), 3, &cfg).unwrap();
        st.classifier.store.entries_mut()[0].value.data_mut()[0] = f32::NAN;
        let imgs: Vec<&Image> = classes[0].images.iter().collect();
        let err = pretrain_step(&mut st, &imgs, &[0; 4], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, levels, ce, .. } => {
                assert_eq!(step, 0);
                assert!(ce.is_nan());
                assert_eq!(levels.len(), 1);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn supervised_loss_falls_on_separable_toy() {
        // setting A, small constant lr: CE non-increasing across windows of 10
        let classes = toy_classes(3, 40, 8);
        let cfg = PretrainConfig {
            epochs: 13,
            batch_size: 24,
            initial_lr: 0.01,
            schedule: Schedule::Constant,
            augment: AugmentConfig::identity(),
            ..Default::default()
        };
        let st = pretrain::<f32>(&cfg, &tiny_config(), &classes, &mut |_, _| Ok(())).unwrap();
        assert!(st.history.len() >= 50);
        let windows: Vec<f64> = st.history[..50].chunks(10).map(|w| w.iter().map(|r| r.ce).sum::<f64>() / 10.0).collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0], "{windows:?}");
        }
    }
}
