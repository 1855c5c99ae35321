//! End-to-end runs: pretrain an encoder, train one relation net per tap on
//! the frozen encoder, then evaluate every tap and their ensemble on the same
//! test episodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::derived_rng;
use crate::encoders::{Encoder, EncoderConfig, TapSpec};
use crate::episodes::{evaluate, EvalReport, LabeledClass, SplitDataset, STANDARD_EPISODES};
use crate::error::{Error, Result};
use crate::fewshot::{train_relation_on_bank, EnsembleClassifier, FeatureBank, Member, RelationNet, RelationTrainConfig};
use crate::pretrain::{pretrain, PretrainConfig, TrainState};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub way: usize,
    pub shots: Vec<usize>,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            way: 5,
            shots: vec![1, 5],
            queries: 15,
            episodes: STANDARD_EPISODES,
            seed: 0,
        }
    }
}

const EVAL_STREAM: u64 = 21;

/// Evaluates each `(encoder, tap, net)` member on its own and all of them as
/// one ensemble, with every evaluation seeing the same episodes.
pub fn evaluate_members<T: Real>(
    encoders: &[&Encoder<T>],
    members: &[(usize, usize, &RelationNet<T>)],
    test: &[LabeledClass],
    shot: usize,
    eval: &EvalConfig,
) -> Result<(Vec<EvalReport>, EvalReport)> {
    if members.is_empty() {
        return Err(Error::Ensemble("no members to evaluate".into()));
    }
    let mut banks: BTreeMap<(usize, usize), FeatureBank<T>> = BTreeMap::new();
    for (e, enc) in encoders.iter().enumerate() {
        let taps: Vec<usize> = members.iter().filter(|m| m.0 == e).map(|m| m.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        if taps.is_empty() {
            continue;
        }
        for (tap, bank) in FeatureBank::build(enc, test, &TapSpec::new(taps)?, 64)? {
            banks.insert((e, tap), bank);
        }
    }
    let run = |ms: Vec<Member<'_, T>>| -> Result<EvalReport> {
        let mut clf = EnsembleClassifier { members: ms };
        let mut rng = derived_rng(eval.seed, EVAL_STREAM, shot as u64);
        evaluate(&mut clf, test, eval.way, shot, eval.queries, eval.episodes, &mut rng)
    };
    let mut singles = Vec::with_capacity(members.len());
    for &(e, tap, net) in members {
        let mut r = run(vec![Member { net, bank: &banks[&(e, tap)] }])?;
        r.label = format!("encoder{e}/tap{tap}");
        singles.push(r);
    }
    let mut ens = run(members.iter().map(|&(e, tap, net)| Member { net, bank: &banks[&(e, tap)] }).collect())?;
    ens.label = "ensemble".into();
    Ok((singles, ens))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingOutcome {
    /// Single-representation reports in tap order.
    pub per_tap: BTreeMap<usize, EvalReport>,
    pub ensemble: EvalReport,
    pub final_losses: Option<(f64, f64)>,
}

/// Trains one relation net per tap from the frozen encoder's training split.
pub fn train_relations<T: Real>(
    encoder: &Encoder<T>,
    train: &[LabeledClass],
    taps: &[usize],
    config: &RelationTrainConfig,
) -> Result<BTreeMap<usize, RelationNet<T>>> {
    let before = encoder.fingerprint();
    let banks = FeatureBank::build(encoder, train, &TapSpec::new(taps.to_vec())?, 64)?;
    let mut nets = BTreeMap::new();
    for (tap, bank) in &banks {
        let (net, losses) = train_relation_on_bank(bank, train, config)?;
        log::info!(
            "tap {tap}: relation loss {:.4} -> {:.4}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        nets.insert(*tap, net);
    }
    let after = encoder.fingerprint();
    if before != after {
        return Err(Error::EncoderModified { before, after });
    }
    Ok(nets)
}

/// Pretrains with `pretrain_cfg`, then trains and evaluates relation nets on
/// `taps` (single members and their ensemble) at one shot count.
pub fn run_setting<T: Real>(
    ds: &SplitDataset,
    encoder_cfg: &EncoderConfig,
    pretrain_cfg: &PretrainConfig,
    relation_cfg: &RelationTrainConfig,
    eval: &EvalConfig,
    shot: usize,
    taps: &[usize],
) -> Result<(SettingOutcome, TrainState<T>)> {
    let state = pretrain::<T>(pretrain_cfg, encoder_cfg, &ds.train, &mut |_, _| Ok(()))?;
    let nets = train_relations(&state.encoder, &ds.train, taps, relation_cfg)?;
    let members: Vec<(usize, usize, &RelationNet<T>)> = nets.iter().map(|(t, n)| (0, *t, n)).collect();
    let (singles, ensemble) = evaluate_members(&[&state.encoder], &members, &ds.test, shot, eval)?;
    let per_tap = members.iter().map(|m| m.1).zip(singles).collect();
    let final_losses = state.history.last().map(|r| (r.ce, r.mlcl));
    Ok((
        SettingOutcome {
            per_tap,
            ensemble,
            final_losses,
        },
        state,
    ))
}
