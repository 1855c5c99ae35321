//! Declarative experiment configuration (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mlcl::checkpoint::fingerprint_of;
use mlcl::encoders::{EncoderConfig, TapSpec};
use mlcl::episodes::{load_dataset, SplitDataset};
use mlcl::experiment::EvalConfig;
use mlcl::fewshot::{EnsembleSpec, RelationTrainConfig};
use mlcl::mlcl::ContrastiveConfig;
use mlcl::pretrain::PretrainConfig;
use mlcl::synthetic::{generate, SyntheticConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Counts (epochs, relation episodes, evaluation episodes) are divided by
/// this factor in smoke mode.
pub const SMOKE_FACTOR: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Pretraining checkpoints are written every this many steps.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    pub dataset: DatasetSpec,
    pub encoders: Vec<EncoderEntry>,
    /// Per-encoder tap ranges, e.g. `"8-6"` or `"16-8, 18-13"`.
    pub ensemble: String,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub relation: RelationTrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_checkpoint_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    /// A `split/class/image` tree, or a manifest of `path, split, class` lines.
    Directory {
        root: PathBuf,
        #[serde(default)]
        manifest: Option<PathBuf>,
        image_size: usize,
        #[serde(default = "default_min_images")]
        min_images: usize,
    },
}

fn default_min_images() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderEntry {
    pub id: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub config: Option<EncoderConfig>,
    /// Contrastive levels; empty disables the contrastive loss.
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default)]
    pub level_weights: Vec<f64>,
    /// Added to the run seed; defaults to the encoder's position.
    #[serde(default)]
    pub seed_offset: Option<u64>,
}

impl EncoderEntry {
    pub fn encoder_config(&self) -> anyhow::Result<EncoderConfig> {
        match (&self.preset, &self.config) {
            (Some(p), None) => Ok(EncoderConfig::preset(p)?),
            (None, Some(c)) => Ok(c.clone()),
            _ => bail!("encoder '{}': set exactly one of `preset` or `config`", self.id),
        }
    }
}

/// Command-line adjustments applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub smoke: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        // toml errors carry the line, column and field path
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if o.smoke {
            let shrink = |n: usize, min: usize| (n / SMOKE_FACTOR).max(min);
            self.pretrain.epochs = shrink(self.pretrain.epochs, 1);
            self.relation.episodes = shrink(self.relation.episodes, 1);
            self.eval.episodes = shrink(self.eval.episodes, 2);
        }
        if let Some(n) = o.episodes {
            self.eval.episodes = n;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version: found {}, this build reads {SCHEMA_VERSION}", self.schema_version);
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        if self.checkpoint_every == 0 {
            bail!("checkpoint_every: must be positive");
        }
        if self.encoders.is_empty() {
            bail!("encoders: at least one encoder is required");
        }
        let mut ids = BTreeSet::new();
        for (i, e) in self.encoders.iter().enumerate() {
            if e.id.is_empty() || !e.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                bail!("encoders[{i}].id: '{}' must be non-empty and use only [A-Za-z0-9_-]", e.id);
            }
            if !ids.insert(&e.id) {
                bail!("encoders[{i}].id: duplicate id '{}'", e.id);
            }
            let enc = e.encoder_config().with_context(|| format!("encoders[{i}]"))?;
            enc.validate().with_context(|| format!("encoders[{i}].config"))?;
            if let Some(size) = self.image_size() {
                if enc.input_size != size {
                    bail!("encoders[{i}]: input_size {} differs from the dataset image size {size}", enc.input_size);
                }
            }
            let c = self.contrastive_for(i)?;
            c.validate().with_context(|| format!("encoders[{i}].levels"))?;
            if c.is_enabled() {
                c.tap_spec()?.check(&enc).with_context(|| format!("encoders[{i}].levels"))?;
            }
        }
        let spec = self.ensemble_spec()?;
        spec.check(&self.encoder_configs()?).context("ensemble")?;
        self.pretrain.validate().context("pretrain")?;
        self.relation.validate().context("relation")?;
        if self.eval.way < 2 || self.eval.queries == 0 || self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            bail!("eval: way ≥ 2, queries ≥ 1 and a non-empty list of positive shots are required");
        }
        if self.eval.episodes < 2 {
            bail!("eval.episodes: at least 2 episodes are needed for a confidence interval");
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate().context("dataset")?;
        }
        Ok(())
    }

    fn image_size(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => Some(s.image_size),
            DatasetSpec::Directory { image_size, .. } => Some(*image_size),
        }
    }

    pub fn encoder_configs(&self) -> anyhow::Result<Vec<EncoderConfig>> {
        self.encoders.iter().map(|e| e.encoder_config()).collect()
    }

    pub fn ensemble_spec(&self) -> anyhow::Result<EnsembleSpec> {
        EnsembleSpec::parse(&self.ensemble).with_context(|| format!("ensemble: '{}'", self.ensemble))
    }

    pub fn encoder_index(&self, id: &str) -> anyhow::Result<usize> {
        self.encoders
            .iter()
            .position(|e| e.id == id)
            .with_context(|| format!("unknown encoder id '{id}'"))
    }

    pub fn contrastive_for(&self, e: usize) -> anyhow::Result<ContrastiveConfig> {
        let entry = &self.encoders[e];
        let base = &self.pretrain.contrastive;
        let mut c = ContrastiveConfig {
            levels: entry.levels.clone(),
            level_weights: entry.level_weights.clone(),
            ..base.clone()
        };
        if c.levels.is_empty() {
            c.level_weights.clear();
        }
        Ok(c)
    }

    /// The pretraining configuration of encoder `e` under run seed `seed`.
    pub fn pretrain_for(&self, e: usize, seed: u64) -> anyhow::Result<PretrainConfig> {
        let offset = self.encoders[e].seed_offset.unwrap_or(e as u64);
        Ok(PretrainConfig {
            contrastive: self.contrastive_for(e)?,
            seed: self.pretrain.seed.wrapping_add(seed).wrapping_add(offset.wrapping_mul(1_000_003)),
            ..self.pretrain.clone()
        })
    }

    pub fn relation_for(&self, seed: u64) -> RelationTrainConfig {
        RelationTrainConfig {
            seed: self.relation.seed.wrapping_add(seed),
            ..self.relation.clone()
        }
    }

    pub fn eval_for(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            seed: self.eval.seed.wrapping_add(seed),
            ..self.eval.clone()
        }
    }

    pub fn dataset_for(&self, seed: u64) -> anyhow::Result<SplitDataset> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => Ok(generate(&SyntheticConfig {
                seed: s.seed.wrapping_add(seed),
                ..s.clone()
            })?),
            DatasetSpec::Directory {
                root,
                manifest,
                image_size,
                min_images,
            } => Ok(load_dataset(root, manifest.as_deref(), *image_size, *min_images)?),
        }
    }

    pub fn fingerprint(&self) -> anyhow::Result<String> {
        Ok(fingerprint_of(self)?)
    }

    /// Taps needed from encoder `e` by the ensemble.
    pub fn taps_for(&self, e: usize) -> anyhow::Result<Option<TapSpec>> {
        let mut taps = self.ensemble_spec()?.taps_for(e);
        taps.sort_unstable();
        taps.dedup();
        if taps.is_empty() {
            return Ok(None);
        }
        Ok(Some(TapSpec::new(taps)?))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed{seed}"))
    }
}
