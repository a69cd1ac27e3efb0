//! Synthetic dataset generation, augmentation and batch assembly.
//!
//! Classes are parametric grating textures: every class owns a distinct
//! (orientation, frequency, phase) triple and samples within a class differ
//! only by pixel noise. Labels exist solely for evaluation; training never
//! sees them. Everything is a pure function of the involved seeds.

pub mod container;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One image with its provenance. Pixels are `(channels, height, width)`
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f64>,
    pub sample_id: u64,
    pub is_augmented: bool,
}

impl ImageSample {
    pub fn new(pixels: Array3<f64>, sample_id: u64, is_augmented: bool) -> Result<Self> {
        for &v in pixels.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "image sample {sample_id}: pixel value {v} outside [0, 1]"
                )));
            }
        }
        Ok(ImageSample { pixels, sample_id, is_augmented })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }
}

/// An original image and its geometric-transform twin.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub original: ImageSample,
    pub augmented: ImageSample,
    pub pair_id: u64,
}

/// Dataset generation parameters. Train and test class sets are disjoint:
/// the first `train_classes` classes form the train split, the rest the test
/// split, mirroring the unseen-class evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub train_classes: usize,
    pub samples_per_class: usize,
    pub image_shape: (usize, usize, usize),
    pub noise_level: f64,
    pub split_seed: u64,
    /// Fractional side length of the augmentation crop window.
    pub crop_fraction: f64,
    /// Probability of a horizontal flip during augmentation.
    pub flip_probability: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 8,
            train_classes: 4,
            samples_per_class: 50,
            image_shape: (1, 16, 16),
            noise_level: 0.25,
            split_seed: 7,
            crop_fraction: 0.8,
            flip_probability: 0.5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("dataset.num_classes must be at least 2".into()));
        }
        if self.train_classes == 0 || self.train_classes >= self.num_classes {
            return Err(Error::Config(format!(
                "dataset.train_classes must be in 1..{} to keep train/test class sets disjoint",
                self.num_classes
            )));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("dataset.samples_per_class must be at least 2".into()));
        }
        let (c, h, w) = self.image_shape;
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::Config(format!(
                "dataset.image_shape ({c}, {h}, {w}) must have channels >= 1 and spatial dims >= 4"
            )));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::Config("dataset.noise_level must lie in [0, 1)".into()));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config("dataset.crop_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("dataset.flip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Images with ground-truth class ids, aligned by index.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Vec<ImageSample>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Disjoint-class train/test splits.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Stride permutation of class indices, so that the leading (train) classes
/// cover the whole orientation range instead of one contiguous band.
fn class_permutation(class: usize, num_classes: usize) -> usize {
    let mut stride = num_classes / 2 + 1;
    while gcd(stride, num_classes) != 1 {
        stride += 1;
    }
    class * stride % num_classes
}

fn class_pattern(cfg: &DatasetConfig, class: usize, phase: f64) -> Array3<f64> {
    let (c, h, w) = cfg.image_shape;
    let spread = class_permutation(class, cfg.num_classes);
    let orientation = PI * spread as f64 / cfg.num_classes as f64;
    let cycles = 1.5 + 2.0 * spread as f64 / cfg.num_classes as f64;
    let (sin_o, cos_o) = orientation.sin_cos();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        let s = u * cos_o + v * sin_o;
        let channel_shift = 2.0 * PI * ch as f64 / c.max(1) as f64;
        0.5 + 0.45 * (2.0 * PI * cycles * s + phase + channel_shift).sin()
    })
}

/// Generate the labeled synthetic collection. Pure function of `(cfg, seed)`:
/// the same inputs reproduce every pixel bit-for-bit.
///
/// Within-class variation scales with `noise_level` and has two parts: a
/// per-sample phase jitter of the class grating (a geometric nuisance the
/// crop augmentation can teach invariance to) and plain pixel noise of
/// amplitude `noise_level`. At `noise_level = 0` all samples of a class are
/// identical.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = LabeledImages { images: Vec::new(), labels: Vec::new() };
    let mut test = LabeledImages { images: Vec::new(), labels: Vec::new() };
    let mut next_id = 0u64;
    for class in 0..cfg.num_classes {
        let class_phase = rng.gen::<f64>() * 2.0 * PI;
        for _ in 0..cfg.samples_per_class {
            let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.noise_level * PI;
            let pattern = class_pattern(cfg, class, class_phase + jitter);
            let pixels = pattern.mapv(|p| {
                let noise = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.noise_level;
                (p + noise).clamp(0.0, 1.0)
            });
            let sample = ImageSample::new(pixels, next_id, false)?;
            next_id += 1;
            if class < cfg.train_classes {
                train.images.push(sample);
                train.labels.push(class);
            } else {
                test.images.push(sample);
                test.labels.push(class);
            }
        }
    }
    Ok(SyntheticDataset { train, test })
}

/// 2-d bilinear resize of one channel from a crop window back to full
/// resolution. The corner-aligned mapping makes a full-size crop an exact
/// identity.
fn resize_channel(
    src: &Array3<f64>,
    channel: usize,
    top: usize,
    left: usize,
    crop_h: usize,
    crop_w: usize,
    out_h: usize,
    out_w: usize,
    out: &mut Array3<f64>,
) {
    for i in 0..out_h {
        let sy = if out_h > 1 {
            i as f64 * (crop_h - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(crop_h - 1);
        let ty = sy - y0 as f64;
        for j in 0..out_w {
            let sx = if out_w > 1 {
                j as f64 * (crop_w - 1) as f64 / (out_w - 1) as f64
            } else {
                0.0
            };
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(crop_w - 1);
            let tx = sx - x0 as f64;
            let v00 = src[[channel, top + y0, left + x0]];
            let v01 = src[[channel, top + y0, left + x1]];
            let v10 = src[[channel, top + y1, left + x0]];
            let v11 = src[[channel, top + y1, left + x1]];
            let v0 = v00 + tx * (v01 - v00);
            let v1 = v10 + tx * (v11 - v10);
            out[[channel, i, j]] = v0 + ty * (v1 - v0);
        }
    }
}

fn crop_resize(img: &ImageSample, top: usize, left: usize, crop_h: usize, crop_w: usize) -> Array3<f64> {
    let (c, h, w) = img.shape();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        resize_channel(&img.pixels, ch, top, left, crop_h, crop_w, h, w, &mut out);
    }
    out
}

fn flip_horizontal(pixels: &mut Array3<f64>) {
    let (c, h, w) = pixels.dim();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w / 2 {
                pixels.swap([ch, y, x], [ch, y, w - 1 - x]);
            }
        }
    }
}

fn crop_window(full: usize, fraction: f64) -> usize {
    ((full as f64 * fraction).round() as usize).clamp(1, full)
}

/// Random crop-and-resize plus optional horizontal flip. The rng state fully
/// determines the transform, so replay with the same state is bit-identical.
pub fn augment(
    img: &ImageSample,
    rng: &mut ChaCha8Rng,
    crop_fraction: f64,
    flip_probability: f64,
) -> Result<ImageSample> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "crop_fraction {crop_fraction} outside (0, 1]"
        )));
    }
    let (_, h, w) = img.shape();
    let crop_h = crop_window(h, crop_fraction);
    let crop_w = crop_window(w, crop_fraction);
    let top = rng.gen_range(0..=h - crop_h);
    let left = rng.gen_range(0..=w - crop_w);
    let mut pixels = crop_resize(img, top, left, crop_h, crop_w);
    if rng.gen::<f64>() < flip_probability {
        flip_horizontal(&mut pixels);
    }
    ImageSample::new(pixels, img.sample_id, true)
}

/// Deterministic test-time view: center crop of the same fractional size,
/// resized back, never flipped.
pub fn center_crop(img: &ImageSample, crop_fraction: f64) -> Result<ImageSample> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "crop_fraction {crop_fraction} outside (0, 1]"
        )));
    }
    let (_, h, w) = img.shape();
    let crop_h = crop_window(h, crop_fraction);
    let crop_w = crop_window(w, crop_fraction);
    let pixels = crop_resize(img, (h - crop_h) / 2, (w - crop_w) / 2, crop_h, crop_w);
    ImageSample::new(pixels, img.sample_id, false)
}

/// A training batch of `2b` images: `b` sampled originals, each immediately
/// followed by its freshly augmented twin.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<ImageSample>,
}

impl Batch {
    /// Total number of images (originals plus twins).
    pub fn m(&self) -> usize {
        self.samples.len()
    }

    /// Index of the twin of sample `i` under the interleaved layout.
    pub fn twin_index(i: usize) -> usize {
        i ^ 1
    }

    pub fn pairs(&self) -> Vec<AugmentedPair> {
        self.samples
            .chunks_exact(2)
            .map(|pair| AugmentedPair {
                original: pair[0].clone(),
                augmented: pair[1].clone(),
                pair_id: pair[0].sample_id,
            })
            .collect()
    }
}

/// One epoch of batches: a seeded shuffle partitioned into chunks of `b`
/// originals (incomplete tail dropped), each original paired with a fresh
/// augmentation.
pub fn make_batches(
    data: &LabeledImages,
    b: usize,
    epoch_seed: u64,
    crop_fraction: f64,
    flip_probability: f64,
) -> Result<Vec<Batch>> {
    if b == 0 {
        return Err(Error::Config("batch size b must be positive".into()));
    }
    if b > data.len() {
        return Err(Error::Config(format!(
            "batch size b = {} exceeds dataset size {}",
            b,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    // Fisher-Yates, spelled out so the stream consumption is explicit.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks_exact(b) {
        let mut samples = Vec::with_capacity(2 * b);
        for &idx in chunk {
            let original = data.images[idx].clone();
            let twin = augment(&original, &mut rng, crop_fraction, flip_probability)?;
            samples.push(original);
            samples.push(twin);
        }
        batches.push(Batch { samples });
    }
    Ok(batches)
}
