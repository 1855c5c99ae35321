//! Procedural few-shot dataset of two-texture images.
//!
//! A class is a pair of texture primitives (pattern type, orientation,
//! spatial frequency): one fills a random elliptical blob, the other the
//! background. Colours (within a configurable spread), blob placement, texture phase, small orientation and
//! frequency jitter, and pixel noise vary per image, so class identity is
//! carried by texture alone.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::episodes::{LabeledClass, SplitDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Spatial frequency range in cycles per image side.
    pub frequency_range: (f64, f64),
    /// Per-image orientation jitter (radians, standard deviation).
    pub angle_jitter: f64,
    /// Per-image relative frequency jitter (standard deviation).
    pub frequency_jitter: f64,
    pub noise_std: f64,
    /// Spread of the per-image colours around mid grey, in `[0, 1]`.
    pub colour_variation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_classes: 32,
            val_classes: 8,
            test_classes: 16,
            images_per_class: 60,
            image_size: 32,
            frequency_range: (2.0, 7.0),
            angle_jitter: 0.12,
            frequency_jitter: 0.06,
            noise_std: 0.05,
            colour_variation: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_classes + self.val_classes + self.test_classes < 2 {
            return Err(Error::config("synthetic", "needs at least two classes"));
        }
        if self.image_size < 8 {
            return Err(Error::config("synthetic.image_size", "must be at least 8"));
        }
        let (lo, hi) = self.frequency_range;
        if !(lo > 0.0 && lo <= hi && hi <= self.image_size as f64 / 2.0) {
            return Err(Error::config("synthetic.frequency_range", "0 < lo ≤ hi ≤ image_size/2"));
        }
        if !(self.angle_jitter >= 0.0 && self.frequency_jitter >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::config("synthetic", "jitter and noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.colour_variation) {
            return Err(Error::config("synthetic.colour_variation", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Sine,
    Square,
    Checker,
    Dots,
}

const PATTERNS: [Pattern; 4] = [Pattern::Sine, Pattern::Square, Pattern::Checker, Pattern::Dots];

#[derive(Debug, Clone, Copy)]
struct Texture {
    pattern: Pattern,
    angle: f64,
    freq: f64,
}

impl Texture {
    fn random(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = cfg.frequency_range;
        Texture {
            pattern: PATTERNS[rng.random_range(0..PATTERNS.len())],
            angle: rng.random_range(0.0..PI),
            // log-uniform frequency
            freq: (rng.random_range(lo.ln()..=hi.ln())).exp(),
        }
    }

    /// Intensity in `[0, 1]` at normalised coordinates `(x, y)`.
    fn at(&self, x: f64, y: f64, phase: (f64, f64)) -> f64 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = 2.0 * PI * self.freq * (x * c + y * s) + phase.0;
        let v = 2.0 * PI * self.freq * (-x * s + y * c) + phase.1;
        match self.pattern {
            Pattern::Sine => 0.5 + 0.5 * u.sin(),
            Pattern::Square => (u.sin() > 0.0) as u8 as f64,
            Pattern::Checker => (u.sin() * v.sin() > 0.0) as u8 as f64,
            Pattern::Dots => (u.sin() * v.sin() > 0.4) as u8 as f64,
        }
    }

    fn jittered(&self, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Texture {
            pattern: self.pattern,
            angle: self.angle + cfg.angle_jitter * n.sample(rng),
            freq: self.freq * (1.0 + cfg.frequency_jitter * n.sample(rng)).max(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ClassDef {
    blob: Texture,
    background: Texture,
}

fn colour_pair(variation: f64, rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let base: [f64; 3] = std::array::from_fn(|_| 0.5 + variation * (rng.random::<f64>() - 0.5));
    // keep enough contrast for the texture to be visible
    let d = rng.random_range(0.15..0.3);
    let a = base.map(|c| (c + d).clamp(0.0, 1.0));
    let b = base.map(|c| (c - d).clamp(0.0, 1.0));
    if rng.random() { (a, b) } else { (b, a) }
}

fn render(cfg: &SyntheticConfig, class: &ClassDef, rng: &mut ChaCha8Rng) -> Image {
    let s = cfg.image_size;
    let blob = class.blob.jittered(cfg, rng);
    let back = class.background.jittered(cfg, rng);
    let (fa, fb) = colour_pair(cfg.colour_variation, rng);
    let (ba, bb) = colour_pair(cfg.colour_variation, rng);
    let phases: [f64; 4] = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let (rx, ry) = (rng.random_range(0.2..0.35), rng.random_range(0.2..0.35));
    let rot: f64 = rng.random_range(0.0..PI);
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
    let mut data = vec![0f32; 3 * s * s];
    for yi in 0..s {
        for xi in 0..s {
            let (x, y) = ((xi as f64 + 0.5) / s as f64, (yi as f64 + 0.5) / s as f64);
            let (dx, dy) = (x - cx, y - cy);
            let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
            let r = (u / rx).powi(2) + (v / ry).powi(2);
            // soft blob edge
            let inside = (1.0 - (r - 1.0) * 4.0).clamp(0.0, 1.0);
            let tb = blob.at(x, y, (phases[0], phases[1]));
            let tg = back.at(x, y, (phases[2], phases[3]));
            for c in 0..3 {
                let fg = fa[c] * tb + fb[c] * (1.0 - tb);
                let bg = ba[c] * tg + bb[c] * (1.0 - tg);
                let val = inside * fg + (1.0 - inside) * bg + noise.sample(rng);
                data[(c * s + yi) * s + xi] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, s, s], data).expect("image shape")
}

/// Generates a class-disjoint dataset; identical configs give identical data.
pub fn generate(cfg: &SyntheticConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.train_classes + cfg.val_classes + cfg.test_classes;
    let defs: Vec<ClassDef> = (0..total)
        .map(|_| ClassDef {
            blob: Texture::random(cfg, &mut rng),
            background: Texture::random(cfg, &mut rng),
        })
        .collect();
    let make = |range: std::ops::Range<usize>| -> Vec<LabeledClass> {
        range
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                r.set_stream(1 + i as u64);
                LabeledClass {
                    name: format!("texture{i:03}"),
                    images: (0..cfg.images_per_class).map(|_| render(cfg, &defs[i], &mut r)).collect(),
                }
            })
            .collect()
    };
    let a = cfg.train_classes;
    let b = a + cfg.val_classes;
    let ds = SplitDataset {
        image_size: cfg.image_size,
        train: make(0..a),
        val: make(a..b),
        test: make(b..total),
    };
    ds.validate(1)?;
    Ok(ds)
}

/// Writes a dataset as a `split/class/NNNN.png` tree.
pub fn write_tree(ds: &SplitDataset, root: &std::path::Path) -> Result<()> {
    for split in crate::episodes::Split::ALL {
        for class in ds.split(split) {
            let dir = root.join(split.name()).join(&class.name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, img) in class.images.iter().enumerate() {
                let s = ds.image_size as u32;
                let buf = image::RgbImage::from_fn(s, s, |x, y| {
                    let px = |c: usize| (img.data()[(c * s as usize + y as usize) * s as usize + x as usize] * 255.0).round() as u8;
                    image::Rgb([px(0), px(1), px(2)])
                });
                let path = dir.join(format!("{i:04}.png"));
                buf.save(&path).map_err(|source| Error::Image { path, source })?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::load_dataset;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_classes: 6,
            val_classes: 2,
            test_classes: 5,
            images_per_class: 4,
            image_size: 16,
            frequency_range: (1.5, 4.0),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train[3].images, b.train[3].images);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (6, 2, 5));
        a.validate(4).unwrap();
        assert!(a.test[0].images.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let c = generate(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train[0].images, c.train[0].images);
    }

    #[test]
    fn twenty_classes_by_default() {
        let d = SyntheticConfig::default();
        assert!(d.train_classes + d.val_classes + d.test_classes >= 20);
    }

    #[test]
    fn tree_round_trip() {
        let ds = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tree(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), None, 16, 4).unwrap();
        assert_eq!(back.test.len(), 5);
        let diff = back.train[1].images[2]
            .data()
            .iter()
            .zip(ds.train[1].images[2].data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(diff <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SyntheticConfig { frequency_range: (3.0, 2.0), ..small() }).is_err());
        assert!(generate(&SyntheticConfig { image_size: 4, ..small() }).is_err());
    }
}
