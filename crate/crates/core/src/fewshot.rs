//! Relation networks over single representations, prototype averaging and
//! score-averaging ensembles.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::derived_rng;
use crate::encoders::{Encoder, EncoderConfig, TapSpec};
use crate::episodes::{images_to_batch, sample_episode, Episode, EpisodeClassifier, ImageRef, LabeledClass};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{SgdConfig, SgdState};
use crate::params::{fan_in_uniform, kaiming_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Element-wise mean of `N ≥ 1` equally shaped feature maps.
pub fn prototype<T: Real>(features: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = features.first() else {
        return Err(Error::Shape("prototype of zero feature maps".into()));
    };
    let mut acc = (*first).clone();
    for f in &features[1..] {
        if f.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "prototype inputs {:?} and {:?} differ",
                first.shape(),
                f.shape()
            )));
        }
        acc.add_assign(f);
    }
    acc.scale(T::one() / T::lit(features.len() as f64));
    Ok(acc)
}

/// Conv(2c→h)+ReLU, conv(h→h)+ReLU, global average pool, FC(h→1), sigmoid.
///
/// The first convolution's kernel is stored as its query half and prototype
/// half; together they are exactly the kernel applied to the
/// `[query ‖ prototype]` channel concatenation.
#[derive(Debug, Clone)]
pub struct RelationNet<T> {
    channels: usize,
    hidden: usize,
    pub store: ParamStore<T>,
    w1q: ParamId,
    w1p: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl<T: Real> RelationNet<T> {
    /// A net for representations with `channels` channels.
    pub fn new(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fan1 = 2 * channels * 9;
        let w1q = store.add("conv1.weight_query", kaiming_normal(&[hidden, channels, 3, 3], fan1, &mut rng));
        let w1p = store.add("conv1.weight_prototype", kaiming_normal(&[hidden, channels, 3, 3], fan1, &mut rng));
        let b1 = store.add("conv1.bias", Tensor::zeros(&[hidden]));
        let w2 = store.add("conv2.weight", kaiming_normal(&[hidden, hidden, 3, 3], hidden * 9, &mut rng));
        let b2 = store.add("conv2.bias", Tensor::zeros(&[hidden]));
        let fc_w = store.add("fc.weight", fan_in_uniform(&[1, hidden], hidden, &mut rng));
        let fc_b = store.add("fc.bias", Tensor::zeros(&[1]));
        RelationNet {
            channels,
            hidden,
            store,
            w1q,
            w1p,
            b1,
            w2,
            b2,
            fc_w,
            fc_b,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel count of the concatenated input.
    pub fn input_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn check(&self, shape: &[usize], what: &str) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "relation net expects N×{}×H×W {what} features, got {shape:?}",
                self.channels
            )));
        }
        Ok(())
    }

    fn head(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let b1 = g.param(&self.store, self.b1);
        let h = g.bias_channels(h, b1)?;
        let h = g.relu(h);
        let w2 = g.param(&self.store, self.w2);
        let h = g.conv2d(h, w2, 1, 1)?;
        let b2 = g.param(&self.store, self.b2);
        let h = g.bias_channels(h, b2)?;
        let h = g.relu(h);
        let pooled = g.global_avg_pool(h)?;
        let (w, b) = (g.param(&self.store, self.fc_w), g.param(&self.store, self.fc_b));
        let logit = g.linear(pooled, w, Some(b))?;
        Ok(g.sigmoid(logit))
    }

    /// Scores every (query, prototype) pair: row `q·K + k` of the `Q·K × 1`
    /// output compares query `q` with prototype `k`.
    pub fn score_graph(&self, g: &mut Graph<T>, queries: Var, prototypes: Var) -> Result<Var> {
        let (qs, ps) = (g.value(queries).shape().to_vec(), g.value(prototypes).shape().to_vec());
        self.check(&qs, "query")?;
        self.check(&ps, "prototype")?;
        if qs[2..] != ps[2..] {
            return Err(Error::Shape(format!("query {qs:?} and prototype {ps:?} differ spatially")));
        }
        let wq = g.param(&self.store, self.w1q);
        let wp = g.param(&self.store, self.w1p);
        let a = g.conv2d(queries, wq, 1, 1)?;
        let b = g.conv2d(prototypes, wp, 1, 1)?;
        let h = g.pair_add(a, b)?;
        self.head(g, h)
    }

    /// `Q×K` score matrix (row-major) for stacked queries and prototypes.
    pub fn score_pairs(&self, queries: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Tensor<T>> {
        let (q, k) = (queries.dim(0), prototypes.dim(0));
        let mut g = Graph::new();
        let qv = g.input(queries.clone());
        let pv = g.input(prototypes.clone());
        let s = self.score_graph(&mut g, qv, pv)?;
        g.value(s).clone().reshape(&[q, k])
    }
}

/// `g(φ(q) ‖ prototype)` for a single `C×H×W` pair, built on the explicit
/// channel concatenation of both the inputs and the two kernel halves.
pub fn relation_score<T: Real>(net: &RelationNet<T>, query: &Tensor<T>, proto: &Tensor<T>) -> Result<f64> {
    let lift = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(&s)
    };
    let (q, p) = (lift(query)?, lift(proto)?);
    net.check(q.shape(), "query")?;
    net.check(p.shape(), "prototype")?;
    if q.shape() != p.shape() {
        return Err(Error::Shape(format!("query {:?} and prototype {:?} differ", q.shape(), p.shape())));
    }
    let mut g = Graph::new();
    let (qv, pv) = (g.input(q), g.input(p));
    let x = g.concat_channels(qv, pv)?;
    let wq = g.param(&net.store, net.w1q);
    let wp = g.param(&net.store, net.w1p);
    let w = g.concat_channels(wq, wp)?;
    let h = g.conv2d(x, w, 1, 1)?;
    let s = net.head(&mut g, h)?;
    Ok(g.value(s).item().as_f64())
}

/// Scores `r_t^(k)(q)` laid out member × class × query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub members: usize,
    pub classes: usize,
    pub queries: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(members: usize, classes: usize, queries: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != members * classes * queries {
            return Err(Error::Shape(format!(
                "{} scores for {members}×{classes}×{queries}",
                data.len()
            )));
        }
        Ok(ScoreMatrix {
            members,
            classes,
            queries,
            data,
        })
    }

    pub fn get(&self, t: usize, k: usize, q: usize) -> f64 {
        self.data[(t * self.classes + k) * self.queries + q]
    }

    /// Member-averaged scores, class × query.
    pub fn mean(&self) -> Vec<f64> {
        let per = self.classes * self.queries;
        let mut acc = vec![0.0; per];
        for t in 0..self.members {
            for (a, &s) in acc.iter_mut().zip(&self.data[t * per..(t + 1) * per]) {
                *a += s;
            }
        }
        let inv = self.members as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        acc
    }

    /// `argmax_k` of the member mean, ties going to the lowest class index.
    pub fn predict(&self) -> Result<Vec<usize>> {
        if self.members == 0 {
            return Err(Error::Ensemble("empty ensemble".into()));
        }
        let mean = self.mean();
        Ok((0..self.queries)
            .map(|q| {
                let mut best = 0;
                for k in 1..self.classes {
                    if mean[k * self.queries + q] > mean[best * self.queries + q] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

/// Per-class feature tensors of one split at one tap, `n_images×C×H×W`.
#[derive(Debug, Clone)]
pub struct FeatureBank<T> {
    pub tap: usize,
    pub classes: Vec<Tensor<T>>,
}

impl<T: Real> FeatureBank<T> {
    /// Runs the frozen encoder (inference mode) over every image once and
    /// keeps the requested taps.
    pub fn build(encoder: &Encoder<T>, classes: &[LabeledClass], taps: &TapSpec, chunk: usize) -> Result<BTreeMap<usize, Self>> {
        taps.check(encoder.config())?;
        let mut banks: BTreeMap<usize, FeatureBank<T>> = taps
            .taps()
            .iter()
            .map(|&t| (t, FeatureBank { tap: t, classes: Vec::new() }))
            .collect();
        for class in classes {
            let mut parts: BTreeMap<usize, Vec<Tensor<T>>> = BTreeMap::new();
            for imgs in class.images.chunks(chunk.max(1)) {
                let refs: Vec<_> = imgs.iter().collect();
                let x = images_to_batch(&refs)?;
                for (tap, t) in encoder.forward_with_taps(&x, taps)? {
                    parts.entry(tap).or_default().push(t);
                }
            }
            for (tap, ts) in parts {
                let rows: Vec<Tensor<T>> = ts.iter().flat_map(|t| (0..t.dim(0)).map(|i| sample_of(t, i))).collect();
                let refs: Vec<&Tensor<T>> = rows.iter().collect();
                banks.get_mut(&tap).unwrap().classes.push(Tensor::stack(&refs)?);
            }
        }
        Ok(banks)
    }

    pub fn channels(&self) -> usize {
        self.classes.first().map_or(0, |t| t.dim(1))
    }

    pub fn feature(&self, r: &ImageRef) -> Tensor<T> {
        sample_of(&self.classes[r.class], r.index)
    }

    /// Stacked query features and per-label prototypes for an episode.
    pub fn episode_tensors(&self, ep: &Episode) -> Result<(Tensor<T>, Tensor<T>)> {
        let q: Vec<Tensor<T>> = ep.query.iter().map(|r| self.feature(r)).collect();
        let queries = Tensor::stack(&q.iter().collect::<Vec<_>>())?;
        let mut protos = Vec::with_capacity(ep.way);
        for label in 0..ep.way {
            let s: Vec<Tensor<T>> = ep.support.iter().filter(|r| r.label == label).map(|r| self.feature(r)).collect();
            protos.push(prototype(&s.iter().collect::<Vec<_>>())?);
        }
        Ok((queries, Tensor::stack(&protos.iter().collect::<Vec<_>>())?))
    }
}

fn sample_of<T: Real>(t: &Tensor<T>, i: usize) -> Tensor<T> {
    let per = t.len() / t.dim(0);
    Tensor::from_vec(&t.shape()[1..], t.data()[i * per..(i + 1) * per].to_vec()).expect("slice matches shape")
}

/// One ensemble member: a relation net and the bank of its representation.
pub struct Member<'a, T> {
    pub net: &'a RelationNet<T>,
    pub bank: &'a FeatureBank<T>,
}

/// Scores of one member on an episode, class × query.
pub fn member_scores<T: Real>(m: &Member<'_, T>, ep: &Episode) -> Result<Vec<f64>> {
    let (queries, protos) = m.bank.episode_tensors(ep)?;
    if m.net.channels() != queries.dim(1) {
        return Err(Error::Ensemble(format!(
            "relation net for {} channels used on tap {} with {} channels",
            m.net.channels(),
            m.bank.tap,
            queries.dim(1)
        )));
    }
    let s = m.net.score_pairs(&queries, &protos)?;
    let (nq, k) = (queries.dim(0), protos.dim(0));
    let mut out = vec![0.0; k * nq];
    for q in 0..nq {
        for c in 0..k {
            out[c * nq + q] = s.data()[q * k + c].as_f64();
        }
    }
    Ok(out)
}

/// Averages member scores and predicts the best class for every query.
pub fn ensemble_classify<T: Real>(members: &[Member<'_, T>], ep: &Episode) -> Result<(Vec<usize>, ScoreMatrix)> {
    if members.is_empty() {
        return Err(Error::Ensemble("ensemble has no members".into()));
    }
    let scores = members.iter().map(|m| member_scores(m, ep)).collect::<Result<Vec<_>>>()?;
    ensemble_from_scores(&scores, ep.way, ep.query.len())
}

/// Stacks per-member class × query score tensors and predicts from their mean.
pub fn ensemble_from_scores(scores: &[Vec<f64>], classes: usize, queries: usize) -> Result<(Vec<usize>, ScoreMatrix)> {
    if scores.is_empty() {
        return Err(Error::Ensemble("ensemble has no members".into()));
    }
    let sm = ScoreMatrix::new(scores.len(), classes, queries, scores.concat())?;
    Ok((sm.predict()?, sm))
}

/// An ensemble bound to feature banks, usable with `episodes::evaluate`.
pub struct EnsembleClassifier<'a, T> {
    pub members: Vec<Member<'a, T>>,
}

impl<T: Real> EpisodeClassifier for EnsembleClassifier<'_, T> {
    fn classify(&mut self, ep: &Episode) -> Result<Vec<usize>> {
        Ok(ensemble_classify(&self.members, ep)?.0)
    }
}

/// `(encoder, tap)` members parsed from per-encoder range groups such as
/// `"16-8, 18-13"` (inclusive ranges, one comma-separated group per encoder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub members: Vec<(usize, usize)>,
}

fn parse_group(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Ensemble(format!("cannot parse tap group '{s}'"));
    let norm = s.trim().replace(['\u{2013}', '\u{2014}'], "-");
    let parts: Vec<&str> = norm.split('-').filter(|p| !p.is_empty()).collect();
    let num = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
    match parts[..] {
        [one] => Ok(vec![num(one)?]),
        [a, b] => {
            let (a, b) = (num(a)?, num(b)?);
            Ok(if a >= b { (b..=a).rev().collect() } else { (a..=b).collect() })
        }
        _ => Err(bad()),
    }
}

impl EnsembleSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut members = Vec::new();
        for (e, group) in text.split(',').enumerate() {
            for tap in parse_group(group)? {
                if tap == 0 {
                    return Err(Error::Ensemble("tap indices start at 1".into()));
                }
                members.push((e, tap));
            }
        }
        if members.is_empty() {
            return Err(Error::Ensemble("empty ensemble".into()));
        }
        Ok(EnsembleSpec { members })
    }

    pub fn encoder_count(&self) -> usize {
        self.members.iter().map(|m| m.0 + 1).max().unwrap_or(0)
    }

    /// Taps requested from encoder `e`.
    pub fn taps_for(&self, e: usize) -> Vec<usize> {
        self.members.iter().filter(|m| m.0 == e).map(|m| m.1).collect()
    }

    /// Checks every group against the encoder it refers to.
    pub fn check(&self, encoders: &[EncoderConfig]) -> Result<()> {
        if self.encoder_count() > encoders.len() {
            return Err(Error::Ensemble(format!(
                "spec has {} groups but {} encoders are configured",
                self.encoder_count(),
                encoders.len()
            )));
        }
        for &(e, tap) in &self.members {
            if tap > encoders[e].tap_count() {
                return Err(Error::TapOutOfRange {
                    tap,
                    max: encoders[e].tap_count(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for EnsembleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: Vec<String> = (0..self.encoder_count())
            .map(|e| {
                let t = self.taps_for(e);
                match t.as_slice() {
                    [one] => one.to_string(),
                    [a, .., b] => format!("{a}-{b}"),
                    [] => String::new(),
                }
            })
            .collect();
        write!(f, "{}", groups.join(", "))
    }
}

impl FromStr for EnsembleSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationTrainConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub lr: f64,
    pub sgd: SgdConfig,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for RelationTrainConfig {
    fn default() -> Self {
        RelationTrainConfig {
            episodes: 2000,
            way: 5,
            shot: 1,
            queries: 15,
            lr: 1e-2,
            sgd: SgdConfig {
                momentum: 0.9,
                nesterov: true,
                weight_decay: 0.0,
            },
            hidden: 64,
            seed: 0,
        }
    }
}

impl RelationTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.queries == 0 {
            return Err(Error::config("relation", "way ≥ 2, shot ≥ 1 and queries ≥ 1 required"));
        }
        if self.hidden == 0 {
            return Err(Error::config("relation.hidden", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("relation.lr", "must be positive"));
        }
        self.sgd.validate()
    }
}

const RELATION_STREAM: u64 = 11;

/// Trains a fresh relation net on episodes from a cached training split;
/// returns it with the per-episode losses.
pub fn train_relation_on_bank<T: Real>(
    bank: &FeatureBank<T>,
    classes: &[LabeledClass],
    config: &RelationTrainConfig,
) -> Result<(RelationNet<T>, Vec<f64>)> {
    config.validate()?;
    let mut net = RelationNet::new(bank.channels(), config.hidden, config.seed ^ bank.tap as u64);
    let mut opt = SgdState::new(net.store.len());
    let mut rng = derived_rng(config.seed, RELATION_STREAM, bank.tap as u64);
    let mut losses = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let ep = sample_episode(classes, config.way, config.shot, config.queries, &mut rng)?;
        let (queries, protos) = bank.episode_tensors(&ep)?;
        let target: Vec<T> = ep
            .query
            .iter()
            .flat_map(|r| (0..ep.way).map(move |k| if k == r.label { T::one() } else { T::zero() }))
            .collect();
        let mut g = Graph::new();
        let (q, p) = (g.input(queries), g.input(protos));
        let s = net.score_graph(&mut g, q, p)?;
        let loss = g.mse(s, &target)?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::Episode(format!("relation training loss became {lv}")));
        }
        let grads = g.backward(loss).for_store(&net.store);
        opt.step(&mut net.store, &grads, &config.sgd, config.lr);
        losses.push(lv);
    }
    Ok((net, losses))
}

/// Trains one relation net per tap on the frozen `encoder`. Fails if the
/// encoder's parameters differ afterwards.
pub fn train_relation_net<T: Real>(
    encoder: &Encoder<T>,
    classes: &[LabeledClass],
    taps: &TapSpec,
    config: &RelationTrainConfig,
) -> Result<BTreeMap<usize, (RelationNet<T>, Vec<f64>)>> {
    let before = encoder.fingerprint();
    let banks = FeatureBank::build(encoder, classes, taps, 64)?;
    let mut out = BTreeMap::new();
    for (tap, bank) in &banks {
        out.insert(*tap, train_relation_on_bank(bank, classes, config)?);
    }
    let after = encoder.fingerprint();
    if before != after {
        return Err(Error::EncoderModified { before, after });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationMeta {
    pub kind: String,
    pub encoder_fingerprint: String,
    pub tap: usize,
    pub channels: usize,
    pub hidden: usize,
    pub losses: Vec<f64>,
}

pub fn save_relation_net<T: Real>(path: &Path, net: &RelationNet<T>, tap: usize, encoder_fingerprint: &str, losses: &[f64]) -> Result<()> {
    let meta = RelationMeta {
        kind: "relation".into(),
        encoder_fingerprint: encoder_fingerprint.into(),
        tap,
        channels: net.channels,
        hidden: net.hidden,
        losses: losses.to_vec(),
    };
    let mut c = Container::new(serde_json::to_value(&meta)?);
    c.push_store("relation", &net.store);
    c.save(path)
}

pub fn load_relation_net<T: Real>(path: &Path) -> Result<(RelationNet<T>, RelationMeta)> {
    let c = Container::load(path)?;
    let meta: RelationMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != "relation" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a relation net, found '{}'", meta.kind),
        });
    }
    let mut net = RelationNet::new(meta.channels, meta.hidden, 0);
    net.store.load_values(&c.group("relation")?)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{build_encoder, SectionConfig};
    use crate::episodes::evaluate;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn prototype_examples() {
        let one = Tensor::full(&[2, 3, 3], 0.7f64);
        assert_eq!(prototype(&[&one]).unwrap(), one);
        let maps: Vec<Tensor<f64>> = (1..=5).map(|v| Tensor::full(&[2, 3, 3], v as f64)).collect();
        let refs: Vec<_> = maps.iter().collect();
        assert_eq!(prototype(&refs).unwrap(), Tensor::full(&[2, 3, 3], 3.0));
        let odd = Tensor::full(&[2, 3, 4], 1.0);
        assert!(prototype(&[&one, &odd]).is_err());
        let copies = vec![&one; 4];
        assert!(prototype(&copies).unwrap().max_abs_diff(&one) < 1e-15);
    }

    #[test]
    fn zero_net_scores_half() {
        let mut net = RelationNet::<f64>::new(3, 4, 1);
        for e in net.store.entries_mut() {
            e.value.scale(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, p) = (rand_tensor(&[3, 4, 4], &mut rng), rand_tensor(&[3, 4, 4], &mut rng));
        assert_eq!(relation_score(&net, &q, &p).unwrap(), 0.5);
        assert_eq!(net.input_channels(), 6);
        let wrong = rand_tensor(&[2, 4, 4], &mut rng);
        assert!(relation_score(&net, &wrong, &wrong).is_err());
    }

    #[test]
    fn batched_scores_match_concatenated_pairs() {
        let net = RelationNet::<f64>::new(3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qs = rand_tensor(&[4, 3, 5, 5], &mut rng);
        let ps = rand_tensor(&[2, 3, 5, 5], &mut rng);
        let s = net.score_pairs(&qs, &ps).unwrap();
        for q in 0..4 {
            for k in 0..2 {
                let single = relation_score(&net, &sample_of(&qs, q), &sample_of(&ps, k)).unwrap();
                assert!((single - s.data()[q * 2 + k]).abs() < 1e-12);
                assert!(single > 0.0 && single < 1.0);
            }
        }
        // order matters: swapping query and prototype changes the score
        let a = relation_score(&net, &sample_of(&qs, 0), &sample_of(&ps, 0)).unwrap();
        let b = relation_score(&net, &sample_of(&ps, 0), &sample_of(&qs, 0)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn averaging_example() {
        let sm = ScoreMatrix::new(2, 2, 1, vec![0.2, 0.9, 0.6, 0.1]).unwrap();
        let m = sm.mean();
        assert!((m[0] - 0.4).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
        assert_eq!(sm.predict().unwrap(), vec![1]);
        let tie = ScoreMatrix::new(1, 3, 1, vec![0.3, 0.7, 0.7]).unwrap();
        assert_eq!(tie.predict().unwrap(), vec![1]);
        assert!(ScoreMatrix::new(0, 3, 1, vec![]).unwrap().predict().is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariances(data in prop::collection::vec(0.01f64..1.0, 24), scale in 0.1f64..10.0, shift in prop::collection::vec(-1.0f64..1.0, 4)) {
            // 2 members × 3 classes × 4 queries
            let sm = ScoreMatrix::new(2, 3, 4, data.clone()).unwrap();
            let base = sm.predict().unwrap();
            let scaled = ScoreMatrix::new(2, 3, 4, data.iter().map(|v| v * scale).collect()).unwrap();
            prop_assert_eq!(scaled.predict().unwrap(), base.clone());
            let mut sh = data.clone();
            for t in 0..2 { for k in 0..3 { for q in 0..4 { sh[(t * 3 + k) * 4 + q] += shift[q]; } } }
            let shifted = ScoreMatrix::new(2, 3, 4, sh).unwrap();
            // shifting can only change predictions through rounding of near-ties
            let m = sm.mean();
            for q in 0..4 {
                let mut vals: Vec<f64> = (0..3).map(|k| m[k * 4 + q]).collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] - vals[1] > 1e-9 {
                    prop_assert_eq!(shifted.predict().unwrap()[q], base[q]);
                }
            }
        }

        #[test]
        fn consensus_members(data in prop::collection::vec(0.0f64..1.0, 12)) {
            let one = ScoreMatrix::new(1, 3, 4, data.clone()).unwrap();
            let three = ScoreMatrix::new(3, 3, 4, [data.clone(), data.clone(), data].concat()).unwrap();
            prop_assert_eq!(one.predict().unwrap(), three.predict().unwrap());
        }
    }

    #[test]
    fn spec_grammar() {
        let s = EnsembleSpec::parse("16--14").unwrap();
        assert_eq!(s.members, vec![(0, 16), (0, 15), (0, 14)]);
        let s = EnsembleSpec::parse("16-8, 18–13").unwrap();
        assert_eq!(s.members.len(), 9 + 6);
        assert_eq!(s.taps_for(1), vec![18, 17, 16, 15, 14, 13]);
        assert_eq!(s.to_string(), "16-8, 18-13");
        assert_eq!(EnsembleSpec::parse("16").unwrap().members, vec![(0, 16)]);
        assert!(EnsembleSpec::parse("a-3").is_err());
        assert!(EnsembleSpec::parse("0").is_err());
        let r18 = EncoderConfig::preset("resnet18").unwrap();
        assert!(matches!(
            EnsembleSpec::parse("99").unwrap().check(std::slice::from_ref(&r18)),
            Err(Error::TapOutOfRange { tap: 99, max: 16 })
        ));
        assert!(EnsembleSpec::parse("16, 16").unwrap().check(std::slice::from_ref(&r18)).is_err());
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            name: "tiny".into(),
            in_channels: 3,
            stem_channels: 4,
            stem_stride: 1,
            sections: vec![SectionConfig {
                blocks: 1,
                channels: 4,
                stride: 2,
            }],
            input_size: 8,
        }
    }

    /// Classes separated by their mean colour.
    fn colour_classes(n: usize, per: usize) -> Vec<LabeledClass> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|c| {
                let hue = [(c % 3) as f32 / 2.0, ((c / 3) % 3) as f32 / 2.0, 0.5];
                LabeledClass {
                    name: format!("c{c}"),
                    images: (0..per)
                        .map(|_| {
                            let d = (0..3 * 64).map(|i| (hue[i / 64] + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0)).collect();
                            Tensor::from_vec(&[3, 8, 8], d).unwrap()
                        })
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn training_beats_chance_and_leaves_encoder_alone() {
        let classes = colour_classes(9, 12);
        let taps = TapSpec::single(2).unwrap();
        for seed in 0..3 {
            let enc = build_encoder::<f32>(&tiny(), seed).unwrap();
            let before = enc.fingerprint();
            let cfg = RelationTrainConfig {
                episodes: 120,
                queries: 5,
                hidden: 8,
                seed,
                ..Default::default()
            };
            let nets = train_relation_net(&enc, &classes, &taps, &cfg).unwrap();
            assert_eq!(before, enc.fingerprint());
            let (net, losses) = &nets[&2];
            assert_eq!(losses.len(), 120);
            let banks = FeatureBank::build(&enc, &classes, &taps, 16).unwrap();
            let mut clf = EnsembleClassifier {
                members: vec![Member { net, bank: &banks[&2] }],
            };
            let r = evaluate(&mut clf, &classes, 5, 1, 5, 40, &mut ChaCha8Rng::seed_from_u64(seed + 100)).unwrap();
            assert!(r.mean_accuracy > 20.0, "seed {seed}: {}", r.mean_accuracy);
        }
    }

    #[test]
    fn zero_episodes_returns_initial_net() {
        let classes = colour_classes(6, 6);
        let enc = build_encoder::<f32>(&tiny(), 0).unwrap();
        let banks = FeatureBank::build(&enc, &classes, &TapSpec::single(1).unwrap(), 4).unwrap();
        let cfg = RelationTrainConfig {
            episodes: 0,
            hidden: 4,
            ..Default::default()
        };
        let (net, losses) = train_relation_on_bank(&banks[&1], &classes, &cfg).unwrap();
        assert!(losses.is_empty());
        let fresh = RelationNet::<f32>::new(4, 4, 1);
        assert_eq!(net.store.fingerprint(), fresh.store.fingerprint());
    }

    #[test]
    fn relation_net_round_trip() {
        let net = RelationNet::<f32>::new(3, 4, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        save_relation_net(&p, &net, 7, "abc", &[0.5, 0.25]).unwrap();
        let (back, meta) = load_relation_net::<f32>(&p).unwrap();
        assert_eq!(back.store.fingerprint(), net.store.fingerprint());
        assert_eq!((meta.tap, meta.encoder_fingerprint.as_str()), (7, "abc"));
    }

    #[test]
    fn ensemble_requires_members() {
        let ep = Episode {
            way: 2,
            shot: 1,
            queries: 1,
            classes: vec![0, 1],
            support: vec![],
            query: vec![],
        };
        assert!(matches!(ensemble_classify::<f32>(&[], &ep), Err(Error::Ensemble(_))));
    }
}
