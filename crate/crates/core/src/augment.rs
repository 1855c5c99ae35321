//! Stochastic two-view augmentation: random resized crop, colour
//! distortion and Gaussian blur.
//!
//! Images are `C×H×W` tensors with values in `[0, 1]`. Sampling and
//! application are separate steps so that every random decision is visible
//! in an [`AugmentParams`] value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Crop,
    Color,
    Blur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Fraction of the image area kept by the crop, `(low, high)`.
    pub crop_scale_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub color_distortion_strength: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma_range: (f64, f64),
    pub enabled_ops: Vec<AugmentOp>,
    /// Smallest image side accepted.
    pub min_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: (0.2, 1.0),
            crop_aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            color_distortion_strength: 0.5,
            grayscale_probability: 0.2,
            blur_probability: 0.5,
            blur_sigma_range: (0.1, 2.0),
            enabled_ops: vec![AugmentOp::Crop, AugmentOp::Color, AugmentOp::Blur],
            min_side: 4,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves images untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            enabled_ops: Vec::new(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64), min: f64| {
            if !(lo >= min && lo <= hi && hi.is_finite()) {
                Err(Error::config(name, format!("range ({lo}, {hi}) must be ordered and ≥ {min}")))
            } else {
                Ok(())
            }
        };
        ordered("crop_scale_range", self.crop_scale_range, f64::MIN_POSITIVE)?;
        if self.crop_scale_range.1 > 1.0 {
            return Err(Error::config("crop_scale_range", "upper bound exceeds 1"));
        }
        ordered("crop_aspect_range", self.crop_aspect_range, f64::MIN_POSITIVE)?;
        ordered("blur_sigma_range", self.blur_sigma_range, f64::MIN_POSITIVE)?;
        for (name, p) in [
            ("grayscale_probability", self.grayscale_probability),
            ("blur_probability", self.blur_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.color_distortion_strength >= 0.0) {
            return Err(Error::config("color_distortion_strength", "must be ≥ 0"));
        }
        Ok(())
    }

    fn enabled(&self, op: AugmentOp) -> bool {
        self.enabled_ops.contains(&op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale: bool,
}

/// Every random choice made for one view.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub crop: Option<CropParams>,
    pub color: Option<ColorParams>,
    pub blur_sigma: Option<f64>,
}

fn check_size(image: &Image, config: &AugmentConfig) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("image must be C×H×W, got {s:?}")));
    }
    if s[1] < config.min_side || s[2] < config.min_side {
        return Err(Error::ImageTooSmall {
            height: s[1],
            width: s[2],
            min: config.min_side,
        });
    }
    Ok((s[0], s[1], s[2]))
}

pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, config: &AugmentConfig, rng: &mut R) -> CropParams {
    let area = (height * width) as f64;
    let (lo, hi) = config.crop_scale_range;
    let (alo, ahi) = (config.crop_aspect_range.0.ln(), config.crop_aspect_range.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(lo..=hi);
        let aspect = rng.random_range(alo..=ahi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            return CropParams {
                top: rng.random_range(0..=height - h),
                left: rng.random_range(0..=width - w),
                height: h,
                width: w,
            };
        }
    }
    // Fallback: the whole image.
    CropParams {
        top: 0,
        left: 0,
        height,
        width,
    }
}

pub fn sample_params<R: Rng + ?Sized>(height: usize, width: usize, config: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let crop = config.enabled(AugmentOp::Crop).then(|| sample_crop(height, width, config, rng));
    let color = config.enabled(AugmentOp::Color).then(|| {
        let s = 0.8 * config.color_distortion_strength;
        let mut factor = || rng.random_range((1.0 - s).max(0.0)..=1.0 + s);
        let (brightness, contrast, saturation) = (factor(), factor(), factor());
        ColorParams {
            brightness,
            contrast,
            saturation,
            grayscale: rng.random_bool(config.grayscale_probability),
        }
    });
    let blur_sigma = if config.enabled(AugmentOp::Blur) && rng.random_bool(config.blur_probability) {
        let (lo, hi) = config.blur_sigma_range;
        Some(rng.random_range(lo..=hi))
    } else {
        None
    };
    AugmentParams {
        crop,
        color,
        blur_sigma,
    }
}

/// Bilinear resize of a crop window back to `out_h × out_w`
/// (half-pixel centres, edge clamped).
pub fn resized_crop(image: &Image, crop: &CropParams, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let sy = crop.height as f64 / out_h as f64;
    let sx = crop.width as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, start: usize, len: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (start + i0, start + i1, (p - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, sy, crop.top, crop.height)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, sx, crop.left, crop.width)).collect();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(image.shape(), out).expect("same shape")
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast and saturation jitter followed by optional
/// grayscale conversion; each stage clamps to `[0, 1]`.
pub fn color_distort(image: &Image, p: &ColorParams) -> Image {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let plane = h * w;
    let mut d: Vec<f32> = image.data().iter().map(|&v| (v * p.brightness as f32).clamp(0.0, 1.0)).collect();
    let gray = |d: &[f32], i: usize| {
        if c == 3 {
            luma(d[i], d[plane + i], d[2 * plane + i])
        } else {
            d[i]
        }
    };
    let mean = (0..plane).map(|i| gray(&d, i) as f64).sum::<f64>() as f32 / plane as f32;
    let k = p.contrast as f32;
    d.iter_mut().for_each(|v| *v = ((*v - mean) * k + mean).clamp(0.0, 1.0));
    if c == 3 {
        let s = p.saturation as f32;
        for i in 0..plane {
            let g = gray(&d, i);
            for ch in 0..3 {
                let v = &mut d[ch * plane + i];
                *v = (g + (*v - g) * s).clamp(0.0, 1.0);
            }
        }
        if p.grayscale {
            for i in 0..plane {
                let g = gray(&d, i);
                for ch in 0..3 {
                    d[ch * plane + i] = g;
                }
            }
        }
    }
    Tensor::from_vec(image.shape(), d).expect("same shape")
}

/// Kernel side: `ceil(0.1 · side)`, bumped to the next odd number.
pub fn blur_kernel_size(side: usize) -> usize {
    let k = (0.1 * side as f64).ceil() as usize;
    let k = k.max(1);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let k = blur_kernel_size(h.min(w));
    let r = (k / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    let weights: Vec<f32> = weights.into_iter().map(|v| v as f32).collect();
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, wt) in weights.iter().enumerate() {
                    let xx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                    s += wt * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, wt) in weights.iter().enumerate() {
                    let yy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                    s += wt * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = s;
            }
        }
    }
    Tensor::from_vec(image.shape(), out).expect("same shape")
}

/// Applies sampled parameters in the order crop → colour → blur.
pub fn apply(image: &Image, params: &AugmentParams) -> Image {
    let (h, w) = (image.dim(1), image.dim(2));
    let mut out = match &params.crop {
        Some(c) => resized_crop(image, c, h, w),
        None => image.clone(),
    };
    if let Some(c) = &params.color {
        out = color_distort(&out, c);
    }
    if let Some(s) = params.blur_sigma {
        out = gaussian_blur(&out, s);
    }
    out
}

/// Two views `(x̄, x̄′)` of one source image.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_index: usize,
}

pub fn augment_two_views<R: Rng + ?Sized>(image: &Image, source_index: usize, config: &AugmentConfig, rng: &mut R) -> Result<AugmentedPair> {
    let (_, h, w) = check_size(image, config)?;
    let pa = sample_params(h, w, config, rng);
    let pb = sample_params(h, w, config, rng);
    Ok(AugmentedPair {
        view_a: apply(image, &pa),
        view_b: apply(image, &pb),
        source_index,
    })
}

/// `2B` views laid out as `[x̄₁, x̄₁′, x̄₂, x̄₂′, …]`, so the positive of view
/// `i` is `i ^ 1`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub views: Vec<Image>,
    pub sources: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn partner(&self, i: usize) -> usize {
        i ^ 1
    }

    pub fn pairing(&self) -> Vec<usize> {
        (0..self.views.len()).map(|i| i ^ 1).collect()
    }
}

pub fn make_contrastive_batch<R: Rng + ?Sized>(images: &[&Image], config: &AugmentConfig, rng: &mut R) -> Result<ContrastiveBatch> {
    if images.is_empty() {
        return Err(Error::BatchTooSmall(0));
    }
    config.validate()?;
    let mut views = Vec::with_capacity(2 * images.len());
    let mut sources = Vec::with_capacity(2 * images.len());
    for (i, img) in images.iter().enumerate() {
        let pair = augment_two_views(img, i, config, rng)?;
        views.push(pair.view_a);
        views.push(pair.view_b);
        sources.extend([i, i]);
    }
    Ok(ContrastiveBatch { views, sources })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(size: usize) -> Image {
        let mut d = Vec::new();
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    d.push(((x + 2 * y + 5 * c) % 17) as f32 / 16.0);
                }
            }
        }
        Tensor::from_vec(&[3, size, size], d).unwrap()
    }

    #[test]
    fn no_ops_is_identity() {
        let img = gradient_image(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = augment_two_views(&img, 0, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(pair.view_a, img);
        assert_eq!(pair.view_b, img);
    }

    #[test]
    fn seeded_views_are_deterministic_and_shape_preserving() {
        let img = gradient_image(20);
        let cfg = AugmentConfig::default();
        let a = augment_two_views(&img, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment_two_views(&img, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.view_a, b.view_a);
        assert_eq!(a.view_b, b.view_b);
        assert_eq!(a.view_a.shape(), img.shape());
        assert_ne!(a.view_a, a.view_b);
    }

    #[test]
    fn constant_image_changes_only_by_color() {
        // Crop and blur are value-invariant on a constant image, so the output
        // must equal the colour transform applied on its own.
        let px = [0.6f32, 0.3, 0.2];
        let mut d = Vec::new();
        for v in px {
            d.extend(std::iter::repeat_n(v, 100));
        }
        let img = Tensor::from_vec(&[3, 10, 10], d).unwrap();
        let cfg = AugmentConfig {
            blur_probability: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = sample_params(10, 10, &cfg, &mut rng);
            let out = apply(&img, &p);
            let c = p.color.unwrap();
            // independent scalar oracle for one pixel
            let b: Vec<f32> = px.iter().map(|v| (v * c.brightness as f32).clamp(0.0, 1.0)).collect();
            let m = luma(b[0], b[1], b[2]);
            let k: Vec<f32> = b.iter().map(|v| ((v - m) * c.contrast as f32 + m).clamp(0.0, 1.0)).collect();
            let g = luma(k[0], k[1], k[2]);
            let mut s: Vec<f32> = k.iter().map(|v| (g + (v - g) * c.saturation as f32).clamp(0.0, 1.0)).collect();
            if c.grayscale {
                let g = luma(s[0], s[1], s[2]);
                s = vec![g; 3];
            }
            for ch in 0..3 {
                for &v in &out.data()[ch * 100..(ch + 1) * 100] {
                    assert!((v - s[ch]).abs() < 1e-5, "channel {ch}: {v} vs {}", s[ch]);
                }
            }
        }
    }

    #[test]
    fn blur_kernel_is_odd() {
        assert_eq!(blur_kernel_size(32), 5);
        assert_eq!(blur_kernel_size(80), 9);
        assert_eq!(blur_kernel_size(84), 9);
        assert_eq!(blur_kernel_size(10), 1);
    }

    #[test]
    fn too_small_image_rejected() {
        let img = Tensor::zeros(&[3, 3, 3]);
        let r = augment_two_views(&img, 0, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn contrastive_batch_pairing() {
        let imgs: Vec<Image> = (0..3).map(|_| gradient_image(8)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_contrastive_batch(&refs[..1], &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.pairing(), vec![1, 0]);
        let b = make_contrastive_batch(&refs, &AugmentConfig::default(), &mut rng).unwrap();
        for i in 0..b.len() {
            let j = b.partner(i);
            assert_ne!(i, j);
            assert_eq!(b.partner(j), i);
            assert_eq!(b.sources[i], b.sources[j]);
            let negatives = (0..b.len()).filter(|&k| k != i && b.sources[k] != b.sources[i]).count();
            assert_eq!(negatives, 2 * (3 - 1));
        }
        assert!(make_contrastive_batch(&[], &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn batch_of_256_gives_512_views() {
        let img = Tensor::zeros(&[3, 4, 4]);
        let refs = vec![&img; 256];
        let b = make_contrastive_batch(&refs, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b.len(), 512);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // Fixed 16×16 crop of a 32×32 image: top and left are uniform on 0..=16.
        let cfg = AugmentConfig {
            crop_scale_range: (0.25, 0.25),
            crop_aspect_range: (1.0, 1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 17 * 400;
        let mut tops = [0usize; 17];
        let mut lefts = [0usize; 17];
        for _ in 0..n {
            let c = sample_crop(32, 32, &cfg, &mut rng);
            assert_eq!((c.height, c.width), (16, 16));
            tops[c.top] += 1;
            lefts[c.left] += 1;
        }
        let expected = n as f64 / 17.0;
        // χ² critical value, 16 degrees of freedom, α = 0.01
        const CRIT: f64 = 32.000;
        for counts in [tops, lefts] {
            let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            assert!(chi2 < CRIT, "chi2 = {chi2}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let c = AugmentConfig {
            blur_probability: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = AugmentConfig {
            crop_scale_range: (0.8, 0.2),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
