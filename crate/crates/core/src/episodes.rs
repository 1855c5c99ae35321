//! Datasets split by class, C-way N-shot episode sampling and the episodic
//! evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel normalisation applied to every network input.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub struct LabeledClass {
    pub name: String,
    pub images: Vec<Image>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Three class-disjoint splits of equally sized `C×S×S` images.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub image_size: usize,
    pub train: Vec<LabeledClass>,
    pub val: Vec<LabeledClass>,
    pub test: Vec<LabeledClass>,
}

impl SplitDataset {
    pub fn split(&self, s: Split) -> &[LabeledClass] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Checks class disjointness, image shapes and the per-class minimum.
    pub fn validate(&self, min_images: usize) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in Split::ALL {
            for c in self.split(s) {
                if let Some(prev) = seen.insert(&c.name, s) {
                    return Err(Error::Dataset(format!(
                        "class '{}' appears in both {} and {}",
                        c.name,
                        prev.name(),
                        s.name()
                    )));
                }
                if c.images.len() < min_images {
                    return Err(Error::ClassTooSmall {
                        class: c.name.clone(),
                        have: c.images.len(),
                        need: min_images,
                    });
                }
                if let Some(img) = c.images.iter().find(|i| i.shape() != [3, self.image_size, self.image_size]) {
                    return Err(Error::Dataset(format!(
                        "class '{}' has an image of shape {:?}, expected [3, {s2}, {s2}]",
                        c.name,
                        img.shape(),
                        s2 = self.image_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stacks images into an `N×3×S×S` batch with channel normalisation.
pub fn images_to_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let shape = first.shape().to_vec();
    let plane = shape[1] * shape[2];
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("mixed image shapes {:?} and {:?}", shape, img.shape())));
        }
        for (i, &v) in img.data().iter().enumerate() {
            let c = (i / plane).min(2);
            data.push(T::lit(((v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]) as f64));
        }
    }
    let mut s = vec![images.len()];
    s.extend_from_slice(&shape);
    Tensor::from_vec(&s, data)
}

fn decode_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut data = vec![0f32; 3 * size * size];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * size + y as usize) * size + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads a dataset either from a `split/class/image` tree under `root` or,
/// when `manifest` is given, from its `relative-path, split, class` records
/// (paths relative to `root`). Images are resized to `size×size`.
pub fn load_dataset(root: &Path, manifest: Option<&Path>, size: usize, min_images: usize) -> Result<SplitDataset> {
    let mut splits: BTreeMap<Split, BTreeMap<String, Vec<PathBuf>>> = BTreeMap::new();
    match manifest {
        Some(m) => {
            let text = fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let parts: Vec<&str> = line.split(',').map(str::trim).collect();
                let [path, split, class] = parts[..] else {
                    return Err(Error::Dataset(format!(
                        "{}:{}: expected 'relative-path, split, class'",
                        m.display(),
                        lineno + 1
                    )));
                };
                let split = Split::parse(split).ok_or_else(|| {
                    Error::Dataset(format!("{}:{}: unknown split '{split}'", m.display(), lineno + 1))
                })?;
                splits
                    .entry(split)
                    .or_default()
                    .entry(class.to_string())
                    .or_default()
                    .push(root.join(path));
            }
        }
        None => {
            for split in Split::ALL {
                let dir = root.join(split.name());
                if !dir.is_dir() {
                    continue;
                }
                for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
                    let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
                    let files = sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)).collect();
                    splits.entry(split).or_default().insert(name, files);
                }
            }
        }
    }
    if splits.values().all(|s| s.is_empty()) {
        return Err(Error::Dataset(format!("no classes found under {}", root.display())));
    }
    let mut load = |s: Split| -> Result<Vec<LabeledClass>> {
        splits
            .remove(&s)
            .unwrap_or_default()
            .into_iter()
            .map(|(name, files)| {
                let images = files.iter().map(|f| decode_image(f, size)).collect::<Result<_>>()?;
                Ok(LabeledClass { name, images })
            })
            .collect()
    };
    let ds = SplitDataset {
        image_size: size,
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    };
    ds.validate(min_images)?;
    Ok(ds)
}

/// One image of an episode: class index within the split, image index within
/// the class and the episode-local label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
    pub label: usize,
}

/// Support and query sets, both ordered label-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub classes: Vec<usize>,
    pub support: Vec<ImageRef>,
    pub query: Vec<ImageRef>,
}

impl Episode {
    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|r| r.label).collect()
    }
}

/// Samples `way` classes, then `shot + queries` distinct images per class.
pub fn sample_episode<R: Rng + ?Sized>(
    classes: &[LabeledClass],
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Episode(format!("way, shot and queries must be positive (got {way}, {shot}, {queries})")));
    }
    if classes.len() < way {
        return Err(Error::Episode(format!("{way}-way episodes need {way} classes, split has {}", classes.len())));
    }
    if let Some(c) = classes.iter().find(|c| c.images.len() < shot + queries) {
        return Err(Error::ClassTooSmall {
            class: c.name.clone(),
            have: c.images.len(),
            need: shot + queries,
        });
    }
    let chosen: Vec<usize> = sample(rng, classes.len(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    let mut picks = Vec::with_capacity(way);
    for &c in &chosen {
        picks.push(sample(rng, classes[c].images.len(), shot + queries).into_vec());
    }
    for (label, (&c, idx)) in chosen.iter().zip(&picks).enumerate() {
        support.extend(idx[..shot].iter().map(|&index| ImageRef { class: c, index, label }));
        query.extend(idx[shot..].iter().map(|&index| ImageRef { class: c, index, label }));
    }
    Ok(Episode {
        way,
        shot,
        queries,
        classes: chosen,
        support,
        query,
    })
}

/// Anything that labels the queries of an episode.
pub trait EpisodeClassifier {
    fn classify(&mut self, episode: &Episode) -> Result<Vec<usize>>;
}

/// Compensated (Neumaier) summation.
pub fn stable_sum(values: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// Mean and 95% CI half-width (`1.96·sd/√n`, sample sd), both as fractions.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewEpisodes(n));
    }
    let mean = stable_sum(values) / n as f64;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let sd = (stable_sum(&sq) / (n - 1) as f64).sqrt();
    Ok((mean, 1.96 * sd / (n as f64).sqrt()))
}

pub const STANDARD_EPISODES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub accuracies: Vec<f64>,
    /// Percent.
    pub mean_accuracy: f64,
    /// Percent.
    pub ci95: f64,
    pub fingerprint: String,
    /// Set when the episode count differs from the standard protocol.
    pub non_standard: bool,
}

/// Runs `episode_count` episodes drawn from `classes` and reports accuracy.
pub fn evaluate<R: Rng + ?Sized>(
    classifier: &mut dyn EpisodeClassifier,
    classes: &[LabeledClass],
    way: usize,
    shot: usize,
    queries: usize,
    episode_count: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if episode_count < 2 {
        return Err(Error::TooFewEpisodes(episode_count));
    }
    let mut accuracies = Vec::with_capacity(episode_count);
    for _ in 0..episode_count {
        let ep = sample_episode(classes, way, shot, queries, rng)?;
        let pred = classifier.classify(&ep)?;
        if pred.len() != ep.query.len() {
            return Err(Error::Episode(format!(
                "classifier returned {} labels for {} queries",
                pred.len(),
                ep.query.len()
            )));
        }
        let correct = pred.iter().zip(&ep.query).filter(|(p, q)| **p == q.label).count();
        accuracies.push(correct as f64 / ep.query.len() as f64);
    }
    let (mean, ci) = mean_ci(&accuracies)?;
    Ok(EvalReport {
        label: String::new(),
        way,
        shot,
        queries,
        episodes: episode_count,
        accuracies,
        mean_accuracy: 100.0 * mean,
        ci95: 100.0 * ci,
        fingerprint: String::new(),
        non_standard: episode_count != STANDARD_EPISODES,
    })
}

/// Predicts uniformly at random; a chance-level baseline.
pub struct RandomClassifier<R>(pub R);

impl<R: Rng> EpisodeClassifier for RandomClassifier<R> {
    fn classify(&mut self, ep: &Episode) -> Result<Vec<usize>> {
        Ok(ep.query.iter().map(|_| self.0.random_range(0..ep.way)).collect())
    }
}

/// Checks that support and query sets of an episode never share an image.
pub fn support_query_disjoint(ep: &Episode) -> bool {
    let s: BTreeSet<(usize, usize)> = ep.support.iter().map(|r| (r.class, r.index)).collect();
    ep.query.iter().all(|r| !s.contains(&(r.class, r.index)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classes(n: usize, per: usize) -> Vec<LabeledClass> {
        (0..n)
            .map(|c| LabeledClass {
                name: format!("c{c:02}"),
                images: (0..per).map(|i| Tensor::full(&[3, 2, 2], (c * 100 + i) as f32)).collect(),
            })
            .collect()
    }

    struct Constant;
    impl EpisodeClassifier for Constant {
        fn classify(&mut self, ep: &Episode) -> Result<Vec<usize>> {
            Ok(vec![0; ep.query.len()])
        }
    }

    struct Oracle;
    impl EpisodeClassifier for Oracle {
        fn classify(&mut self, ep: &Episode) -> Result<Vec<usize>> {
            Ok(ep.query_labels())
        }
    }

    #[test]
    fn episode_sizes() {
        let cs = classes(10, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&cs, 5, 1, 15, &mut rng).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (5, 75));
        let ep = sample_episode(&cs, 5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        let again = sample_episode(&cs, 5, 5, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let first = sample_episode(&cs, 5, 5, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(again, first);
    }

    #[test]
    fn infeasible_episodes() {
        let cs = classes(4, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_episode(&cs, 5, 1, 15, &mut rng), Err(Error::Episode(_))));
        let cs = classes(6, 10);
        assert!(matches!(
            sample_episode(&cs, 5, 1, 15, &mut rng),
            Err(Error::ClassTooSmall { need: 16, .. })
        ));
    }

    #[test]
    fn constant_and_oracle_classifiers() {
        let cs = classes(8, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = evaluate(&mut Constant, &cs, 5, 1, 15, 30, &mut rng).unwrap();
        assert_eq!(r.mean_accuracy, 20.0);
        assert_eq!(r.ci95, 0.0);
        let r = evaluate(&mut Oracle, &cs, 5, 1, 15, 30, &mut rng).unwrap();
        assert_eq!((r.mean_accuracy, r.ci95), (100.0, 0.0));
        assert!(r.non_standard);
        assert!(matches!(
            evaluate(&mut Oracle, &cs, 5, 1, 15, 1, &mut rng),
            Err(Error::TooFewEpisodes(1))
        ));
    }

    #[test]
    fn report_is_reproducible() {
        let cs = classes(8, 20);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut clf = RandomClassifier(ChaCha8Rng::seed_from_u64(10));
            evaluate(&mut clf, &cs, 5, 1, 15, 50, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.accuracies.len(), 50);
    }

    #[test]
    fn ci_formula() {
        let (m, ci) = mean_ci(&[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        let sd = (0.2f64 / 3.0).sqrt();
        assert!((ci - 1.96 * sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn stable_sum_compensates() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(stable_sum(&v), 1.0);
    }

    #[test]
    fn overlapping_classes_rejected() {
        let cs = classes(3, 20);
        let ds = SplitDataset {
            image_size: 2,
            train: cs.clone(),
            val: vec![],
            test: cs[..1].to_vec(),
        };
        assert!(matches!(ds.validate(1), Err(Error::Dataset(m)) if m.contains("c00")));
    }

    #[test]
    fn batch_normalisation() {
        let img = Tensor::full(&[3, 1, 1], 0.5f32);
        let b: Tensor<f64> = images_to_batch(&[&img, &img]).unwrap();
        assert_eq!(b.shape(), &[2, 3, 1, 1]);
        assert!((b.data()[0] - ((0.5 - 0.485) / 0.229) as f64).abs() < 1e-6);
    }

    fn write_png(path: &Path, shade: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(6, 6, image::Rgb([shade, 0, 255 - shade])).save(path).unwrap();
    }

    #[test]
    fn loads_tree_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (split, class) in [("train", "a"), ("train", "b"), ("test", "c")] {
            for i in 0..3 {
                write_png(&root.join(split).join(class).join(format!("{i}.png")), 40 * i as u8);
            }
        }
        let ds = load_dataset(root, None, 4, 3).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (2, 0, 1));
        assert_eq!(ds.test[0].images[0].shape(), &[3, 4, 4]);
        assert!((ds.test[0].images[0].data()[0] - 0.0).abs() < 1e-6);
        assert!(matches!(
            load_dataset(root, None, 4, 4),
            Err(Error::ClassTooSmall { have: 3, need: 4, .. })
        ));

        let manifest = root.join("list.txt");
        fs::write(&manifest, "# path, split, class\ntrain/a/0.png, train, a\ntrain/a/1.png, test, a\n").unwrap();
        assert!(matches!(load_dataset(root, Some(&manifest), 4, 1), Err(Error::Dataset(_))));
        fs::write(&manifest, "train/a/0.png, train, a\ntrain/b/1.png, test, b\n").unwrap();
        let ds = load_dataset(root, Some(&manifest), 4, 1).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (1, 1));
        fs::write(&manifest, "train/a/0.png, holdout, a\n").unwrap();
        assert!(load_dataset(root, Some(&manifest), 4, 1).is_err());
    }

    proptest! {
        #[test]
        fn episodes_are_well_formed(seed in any::<u64>(), way in 2usize..6, shot in 1usize..4, q in 1usize..6) {
            let cs = classes(7, 12);
            let ep = sample_episode(&cs, way, shot, q, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(support_query_disjoint(&ep));
            let distinct: BTreeSet<_> = ep.classes.iter().collect();
            prop_assert_eq!(distinct.len(), way);
            for l in 0..way {
                prop_assert_eq!(ep.query.iter().filter(|r| r.label == l).count(), q);
                prop_assert_eq!(ep.support.iter().filter(|r| r.label == l).count(), shot);
                prop_assert!(ep.query.iter().chain(&ep.support).filter(|r| r.label == l).all(|r| r.class == ep.classes[l]));
            }
        }
    }
}
