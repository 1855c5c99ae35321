//! Record of the artifacts an experiment has produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mlcl::checkpoint::atomic_write;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Checkpoint,
    Metrics,
    RelationNet,
    Report,
    Plot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub seed: Option<u64>,
    pub encoder: Option<String>,
    pub tap: Option<usize>,
    pub shot: Option<usize>,
    /// Fingerprint of the effective configuration that produced the
    /// artifact; the configuration itself is stored under `configs`.
    pub config_fingerprint: String,
    /// SHA-256 of the file contents.
    pub sha256: String,
    pub created: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Effective configurations used so far, by fingerprint.
    pub configs: BTreeMap<String, PathBuf>,
    pub created: u64,
    pub updated: u64,
    pub artifacts: Vec<Artifact>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Default for RunManifest {
    fn default() -> Self {
        Self::new()
    }
}

impl RunManifest {
    pub fn new() -> Self {
        let t = now();
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            configs: BTreeMap::new(),
            created: t,
            updated: t,
            artifacts: Vec::new(),
        }
    }

    /// Loads the manifest in `dir`, or starts an empty one.
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        if dir.join(MANIFEST_FILE).exists() {
            Self::load(dir)
        } else {
            Ok(Self::new())
        }
    }

    /// Stores `toml` as `configs/<fingerprint>.toml` and lists it.
    pub fn register_config(&mut self, dir: &Path, fingerprint: &str, toml: &str) -> anyhow::Result<()> {
        let rel = PathBuf::from("configs").join(format!("{fingerprint}.toml"));
        let path = dir.join(&rel);
        std::fs::create_dir_all(path.parent().expect("configs dir"))?;
        atomic_write(&path, toml.as_bytes())?;
        self.configs.insert(fingerprint.into(), rel);
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&mut self, dir: &Path) -> anyhow::Result<()> {
        self.updated = now();
        std::fs::create_dir_all(dir)?;
        atomic_write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    /// Adds or replaces the entry for `artifact.path`.
    pub fn record(&mut self, dir: &Path, mut artifact: Artifact) -> anyhow::Result<()> {
        artifact.sha256 = file_sha256(&dir.join(&artifact.path))?;
        artifact.created = now();
        self.artifacts.retain(|a| a.path != artifact.path);
        self.artifacts.push(artifact);
        Ok(())
    }

    pub fn find(&self, kind: ArtifactKind, seed: u64, encoder: &str, tap: Option<usize>) -> Option<&Artifact> {
        self.artifacts
            .iter()
            .find(|a| a.kind == kind && a.seed == Some(seed) && a.encoder.as_deref() == Some(encoder) && a.tap == tap)
    }

    /// Checks that every listed artifact exists with the recorded contents.
    pub fn verify(&self, dir: &Path) -> anyhow::Result<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.exists() {
                bail!("artifact {} is listed in the manifest but missing", p.display());
            }
            let h = file_sha256(&p)?;
            if h != a.sha256 {
                bail!("artifact {} changed since it was recorded", p.display());
            }
            match self.configs.get(&a.config_fingerprint) {
                Some(c) if dir.join(c).exists() => {}
                _ => bail!("artifact {} refers to an unrecorded configuration {}", p.display(), a.config_fingerprint),
            }
        }
        Ok(())
    }
}

impl Artifact {
    pub fn new(kind: ArtifactKind, path: impl Into<PathBuf>, config_fingerprint: &str) -> Self {
        Artifact {
            kind,
            path: path.into(),
            seed: None,
            encoder: None,
            tap: None,
            shot: None,
            config_fingerprint: config_fingerprint.into(),
            sha256: String::new(),
            created: 0,
        }
    }

    pub fn seed(mut self, s: u64) -> Self {
        self.seed = Some(s);
        self
    }

    pub fn encoder(mut self, id: &str) -> Self {
        self.encoder = Some(id.into());
        self
    }

    pub fn tap(mut self, t: usize) -> Self {
        self.tap = Some(t);
        self
    }

    pub fn shot(mut self, n: usize) -> Self {
        self.shot = Some(n);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_verify_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"abc").unwrap();
        let mut m = RunManifest::new();
        m.register_config(dir.path(), "fp", "schema_version = 1").unwrap();
        m.record(dir.path(), Artifact::new(ArtifactKind::Checkpoint, "a.bin", "fp").seed(0).encoder("e")).unwrap();
        m.record(dir.path(), Artifact::new(ArtifactKind::Checkpoint, "a.bin", "fp").seed(0).encoder("e")).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        m.save(dir.path()).unwrap();
        let back = RunManifest::open(dir.path()).unwrap();
        assert_eq!(back.artifacts, m.artifacts);
        back.verify(dir.path()).unwrap();
        assert!(back.find(ArtifactKind::Checkpoint, 0, "e", None).is_some());
        let mut unlisted = back.clone();
        unlisted.configs.clear();
        assert!(unlisted.verify(dir.path()).is_err());
        std::fs::write(dir.path().join("a.bin"), b"abd").unwrap();
        assert!(back.verify(dir.path()).is_err());
        std::fs::remove_file(dir.path().join("a.bin")).unwrap();
        assert!(back.verify(dir.path()).is_err());
    }
}
