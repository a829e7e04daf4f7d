//! Synthetic shapes-and-textures corpus, augmentation and input
//! normalization.
//!
//! Class 0 is textured background only. Every other class draws one object
//! whose shape and color are fixed by the class, so class identity, dense
//! labels and depth all carry learnable signal. Sample `i` depends only on
//! `(seed, i)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::interp::{resample_taps, resize_forward, GridDims};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Object size as a fraction of the image side, `[min, max]`.
    pub object_scale: [f32; 2],
    /// Background texture frequency in cycles per image, `[min, max]`.
    pub texture_freq: [f32; 2],
    pub texture_amplitude: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            images_per_class: 128,
            image_size: 32,
            object_scale: [0.45, 0.75],
            texture_freq: [1.0, 4.0],
            texture_amplitude: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            bail!(Config, "num_classes must be in 1..=65535, got {}", self.num_classes);
        }
        if self.image_size < 8 {
            bail!(Config, "image_size must be at least 8, got {}", self.image_size);
        }
        let [lo, hi] = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 0.9) {
            bail!(Config, "object_scale must satisfy 0 < min <= max <= 0.9, got {:?}", self.object_scale);
        }
        let [flo, fhi] = self.texture_freq;
        if !(flo >= 0.0 && flo <= fhi) {
            bail!(Config, "texture_freq must satisfy 0 <= min <= max, got {:?}", self.texture_freq);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.images_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub class_label: usize,
    /// Row-major per-pixel class map, 0 for background.
    pub dense_label: Vec<u16>,
    pub keypoints: Vec<Keypoint>,
    /// `[H, W]` synthetic depth.
    pub depth_map: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Mirrors image, labels, depth and keypoints left to right.
    pub fn hflip(&self) -> Sample {
        let (h, w) = (self.height(), self.width());
        let flip = |src: &[f32], c: usize| -> Vec<f32> {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
                    out[b..b + c].copy_from_slice(&src[a..a + c]);
                }
            }
            out
        };
        let mut dense = vec![0u16; h * w];
        for y in 0..h {
            for x in 0..w {
                dense[y * w + (w - 1 - x)] = self.dense_label[y * w + x];
            }
        }
        Sample {
            image: Tensor::new(vec![h, w, 3], flip(self.image.data(), 3)).expect("same shape"),
            class_label: self.class_label,
            dense_label: dense,
            keypoints: self
                .keypoints
                .iter()
                .map(|k| Keypoint { x: (w - 1) as f32 - k.x, ..*k })
                .collect(),
            depth_map: Tensor::new(vec![h, w], flip(self.depth_map.data(), 1)).expect("same shape"),
        }
    }
}

/// Object color of class `c >= 1`: evenly spaced saturated hues.
pub fn class_color(c: usize, num_classes: usize) -> [f32; 3] {
    let objects = (num_classes.max(2) - 1) as f32;
    let hue = (c - 1) as f32 / objects * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (v, lo) = (0.95, 0.1);
    let up = lo + (v - lo) * f;
    let down = v - (v - lo) * f;
    match sector {
        0 => [v, up, lo],
        1 => [down, v, lo],
        2 => [lo, v, up],
        3 => [lo, down, v],
        4 => [up, lo, v],
        _ => [v, lo, down],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

pub fn class_shape(c: usize) -> Shape {
    match (c - 1) % 3 {
        0 => Shape::Disk,
        1 => Shape::Square,
        _ => Shape::Triangle,
    }
}

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        // Upward-pointing triangle with apex at -r and base at +r/2.
        Shape::Triangle => dy >= -r && dy <= 0.5 * r && dx.abs() <= (dy + r) / 1.5 * 0.866,
    }
}

/// Deterministic generation of sample `index` of `spec`.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = rng::stream(spec.seed, 1_000_000 + index as u64);
    let s = spec.image_size;
    let class = index / spec.images_per_class.max(1);
    let freq = rng.random_range(spec.texture_freq[0]..=spec.texture_freq[1]);
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());

    let mut image = vec![0.0f32; s * s * 3];
    let mut dense = vec![0u16; s * s];
    let mut depth = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let u = (x as f32 * ct + y as f32 * st) / s as f32;
            let g = 0.5 + spec.texture_amplitude * (std::f32::consts::TAU * freq * u + phase).sin();
            image[(y * s + x) * 3..(y * s + x) * 3 + 3].fill(g);
            depth[y * s + x] = 2.0 - y as f32 / s as f32;
        }
    }

    let mut keypoints = Vec::new();
    if class > 0 {
        let shape = class_shape(class);
        let base = class_color(class, spec.num_classes);
        let color: Vec<f32> = base.iter().map(|&c| (c + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)).collect();
        let r = 0.5 * s as f32 * rng.random_range(spec.object_scale[0]..=spec.object_scale[1]);
        let margin = r + 1.0;
        let span = (s as f32 - 2.0 * margin).max(0.0);
        let cx = margin + rng.random_range(0.0..=1.0) * span;
        let cy = margin + rng.random_range(0.0..=1.0) * span;
        let object_depth = rng.random_range(0.4..0.8);
        let mut mask = Vec::new();
        for y in 0..s {
            for x in 0..s {
                if inside(shape, x as f32 - cx, y as f32 - cy, r) {
                    let i = y * s + x;
                    image[i * 3..i * 3 + 3].copy_from_slice(&color);
                    dense[i] = class as u16;
                    depth[i] = object_depth;
                    mask.push((x, y));
                }
            }
        }
        keypoints = extreme_points(&mask);
    }
    Sample {
        image: Tensor::new(vec![s, s, 3], image).expect("sized by construction"),
        class_label: class,
        dense_label: dense,
        keypoints,
        depth_map: Tensor::new(vec![s, s], depth).expect("sized by construction"),
    }
}

/// Top, bottom, left, right and center of a pixel mask, ids 0..5.
fn extreme_points(mask: &[(usize, usize)]) -> Vec<Keypoint> {
    if mask.is_empty() {
        return Vec::new();
    }
    let median_along = |pts: Vec<usize>| -> usize {
        let mut pts = pts;
        pts.sort_unstable();
        pts[pts.len() / 2]
    };
    let min_y = mask.iter().map(|p| p.1).min().unwrap();
    let max_y = mask.iter().map(|p| p.1).max().unwrap();
    let min_x = mask.iter().map(|p| p.0).min().unwrap();
    let max_x = mask.iter().map(|p| p.0).max().unwrap();
    let top = median_along(mask.iter().filter(|p| p.1 == min_y).map(|p| p.0).collect());
    let bottom = median_along(mask.iter().filter(|p| p.1 == max_y).map(|p| p.0).collect());
    let left = median_along(mask.iter().filter(|p| p.0 == min_x).map(|p| p.1).collect());
    let right = median_along(mask.iter().filter(|p| p.0 == max_x).map(|p| p.1).collect());
    // Center: the mask pixel closest to the centroid, so it lies on the object.
    let n = mask.len() as f64;
    let mx = mask.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = mask.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let center = *mask
        .iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - mx).powi(2) + (a.1 as f64 - my).powi(2);
            let db = (b.0 as f64 - mx).powi(2) + (b.1 as f64 - my).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    [(top, min_y), (bottom, max_y), (min_x, left), (max_x, right), center]
        .iter()
        .enumerate()
        .map(|(id, &(x, y))| Keypoint { x: x as f32, y: y as f32, id: id as u32 })
        .collect()
}

/// Class-balanced corpus, labels in blocks of `images_per_class`.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.len()).map(|i| generate_sample(spec, i)).collect())
}

/// Images only; the training path never sees labels.
pub fn corpus_images(samples: &[Sample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.image.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_scale: [f32; 2],
    pub hflip_prob: f32,
    pub jitter_prob: f32,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`.
    pub jitter_strength: f32,
    pub blur_prob: f32,
    pub blur_sigma: [f32; 2],
    pub solarize_prob: f32,
    pub solarize_threshold: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop_scale: [0.25, 1.0],
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 1.0],
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every random transform switched off; only the crop-resize remains.
    pub fn crop_only() -> Self {
        AugmentConfig { hflip_prob: 0.0, jitter_prob: 0.0, blur_prob: 0.0, solarize_prob: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            bail!(Config, "crop_scale must lie in (0, 1] with min <= max, got {:?}", self.crop_scale);
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} must be a probability, got {p}");
            }
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            bail!(Config, "blur_sigma must satisfy 0 < min <= max, got {:?}", self.blur_sigma);
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            bail!(Config, "jitter_strength must lie in [0, 1), got {}", self.jitter_strength);
        }
        Ok(())
    }
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] if h >= 2 && w >= 2 => Ok((h, w)),
        _ => bail!(Dimension, "expected an [H, W, 3] image of at least 2x2, got {:?}", image.shape()),
    }
}

/// Bicubic resample of the window `(x0, y0, cw, ch)` onto `out_h x out_w`.
pub fn resample_window(
    image: &Tensor,
    (x0, y0, cw, ch): (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (h, w) = image_hw(image)?;
    if out_h == 0 || out_w == 0 {
        bail!(Dimension, "output size must be positive");
    }
    let ys = resample_taps(h, out_h, y0, ch);
    let xs = resample_taps(w, out_w, x0, cw);
    let dims = GridDims::of(image.shape())?;
    let data = resize_forward(image.data(), dims, &ys, &xs);
    Tensor::new(vec![out_h, out_w, 3], data)
}

/// Crop whose area fraction is uniform in `scale` and whose aspect ratio is
/// log-uniform in `[3/4, 4/3]`, resized to `out_size`. After ten rejected
/// draws the whole image is used.
pub fn random_resized_crop(image: &Tensor, rng: &mut StreamRng, scale: [f32; 2], out_size: usize) -> Result<Tensor> {
    let (h, w) = image_hw(image)?;
    if !(scale[0] > 0.0 && scale[0] <= scale[1] && scale[1] <= 1.0) {
        bail!(Parameter, "crop scale range must lie in (0, 1], got {scale:?}");
    }
    let area = (h * w) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let s = if scale[0] == scale[1] { scale[0] as f64 } else { rng.random_range(scale[0] as f64..scale[1] as f64) };
        let r = rng.random_range(lo..hi).exp();
        let cw = (s * area * r).sqrt();
        let ch = (s * area / r).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let x0 = rng.random_range(0.0..=(w as f64 - cw));
            let y0 = rng.random_range(0.0..=(h as f64 - ch));
            return resample_window(image, (x0, y0, cw, ch), out_size, out_size);
        }
    }
    resample_window(image, (0.0, 0.0, w as f64, h as f64), out_size, out_size)
}

pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (h, w) = image_hw(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (a, b) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
            out[b..b + 3].copy_from_slice(&src[a..a + 3]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness, contrast, then saturation with the given factors.
pub fn color_jitter(image: &Tensor, brightness: f32, contrast: f32, saturation: f32) -> Tensor {
    let mut data: Vec<f32> = image.data().iter().map(|v| (v * brightness).clamp(0.0, 1.0)).collect();
    let mean = data.chunks(3).map(|p| luma(p) as f64).sum::<f64>() as f32 / (data.len() / 3) as f32;
    for v in &mut data {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for p in data.chunks_mut(3) {
        let g = luma(p);
        for v in p {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and clamped edges.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Result<Tensor> {
    let (h, w) = image_hw(image)?;
    if !(sigma > 0.0) {
        bail!(Parameter, "blur sigma must be positive, got {sigma}");
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, &kw) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                for c in 0..3 {
                    tmp[(y * w + x) * 3 + c] += kw * src[(y * w + sx) * 3 + c];
                }
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for (k, &kw) in kernel.iter().enumerate() {
            let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] += kw * tmp[(sy * w + x) * 3 + c];
                }
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Inverts every value at or above `threshold`.
pub fn solarize(image: &Tensor, threshold: f32) -> Tensor {
    let data = image.data().iter().map(|&v| if v >= threshold { 1.0 - v } else { v }).collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Crop, flip, color jitter, blur and solarize, in that order, with the
/// result clamped to `[0, 1]`.
pub fn augment(image: &Tensor, rng: &mut StreamRng, config: &AugmentConfig, out_size: usize) -> Result<Tensor> {
    let mut x = random_resized_crop(image, rng, config.crop_scale, out_size)?;
    if rng.random::<f32>() < config.hflip_prob {
        x = hflip(&x)?;
    }
    if rng.random::<f32>() < config.jitter_prob {
        let s = config.jitter_strength;
        let mut factor = || if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
        let (b, c, sat) = (factor(), factor(), factor());
        x = color_jitter(&x, b, c, sat);
    }
    if rng.random::<f32>() < config.blur_prob {
        let [lo, hi] = config.blur_sigma;
        let sigma = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        x = gaussian_blur(&x, sigma)?;
    }
    if rng.random::<f32>() < config.solarize_prob {
        x = solarize(&x, config.solarize_threshold);
    }
    let data = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Plain bicubic resize of a whole image.
pub fn resize_image(image: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w) = image_hw(image)?;
    if (h, w) == (size, size) {
        return Ok(image.clone());
    }
    resample_window(image, (0.0, 0.0, w as f64, h as f64), size, size)
}

/// Per-channel `(x - mean) / std` with the ImageNet constants.
pub fn normalize_input(image: &Tensor) -> Result<Tensor> {
    image_hw(image)?;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - IMAGENET_MEAN[i % 3]) / IMAGENET_STD[i % 3])
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

pub fn denormalize_input(image: &Tensor) -> Result<Tensor> {
    image_hw(image)?;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * IMAGENET_STD[i % 3] + IMAGENET_MEAN[i % 3])
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

// Corpus files.
//
// manifest.txt:
//   distillkit-corpus 1
//   num_classes <C>
//   count <M>
//   <one record file name per line>
//
// Each record, little-endian: magic "DSTLSMPL", u32 version, u32 height,
// u32 width, u32 class label, H*W*3 f32 image, H*W u16 dense labels,
// H*W f32 depth, u32 keypoint count, then (f32 x, f32 y, u32 id) each.

const SAMPLE_MAGIC: &[u8; 8] = b"DSTLSMPL";
const SAMPLE_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "distillkit-corpus 1";

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::with_capacity(32 + h * w * 18 + sample.keypoints.len() * 12);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [SAMPLE_VERSION, h as u32, w as u32, sample.class_label as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &sample.dense_label {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in sample.depth_map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(sample.keypoints.len() as u32).to_le_bytes());
    for k in &sample.keypoints {
        out.extend_from_slice(&k.x.to_le_bytes());
        out.extend_from_slice(&k.y.to_le_bytes());
        out.extend_from_slice(&k.id.to_le_bytes());
    }
    out
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'a str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Truncated, "{} ends after {} bytes", self.what, self.buf.len());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let mut r = ByteReader::new(bytes, "sample record");
    if r.take(8)? != SAMPLE_MAGIC {
        bail!(Format, "not a sample record (bad magic)");
    }
    let version = r.u32()?;
    if version != SAMPLE_VERSION {
        return Err(Error::Version { found: version, expected: SAMPLE_VERSION });
    }
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let class_label = r.u32()? as usize;
    if h < 2 || w < 2 || h > 1 << 14 || w > 1 << 14 {
        bail!(Format, "implausible sample size {h}x{w}");
    }
    let image = Tensor::new(vec![h, w, 3], r.f32s(h * w * 3)?)?;
    if !image.all_finite() {
        bail!(Format, "sample image contains non-finite values");
    }
    let dense_label = (0..h * w).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let depth_map = Tensor::new(vec![h, w], r.f32s(h * w)?)?;
    let n = r.u32()? as usize;
    let mut keypoints = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let xy = r.f32s(2)?;
        keypoints.push(Keypoint { x: xy[0], y: xy[1], id: r.u32()? });
    }
    if !r.finished() {
        bail!(Format, "trailing bytes after sample record");
    }
    Ok(Sample { image, class_label, dense_label, keypoints, depth_map })
}

pub fn export_corpus(dir: &Path, samples: &[Sample], num_classes: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\nnum_classes {num_classes}\ncount {}\n", samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:06}.bin");
        fs::File::create(dir.join(&name))?.write_all(&encode_sample(s))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loaded corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        bail!(Format, "{} is not a corpus manifest", dir.join("manifest.txt").display());
    }
    let mut field = |key: &str| -> Result<usize> {
        let line = lines.next().unwrap_or_default();
        match line.strip_prefix(key).map(|v| v.trim().parse::<usize>()) {
            Some(Ok(v)) => Ok(v),
            _ => bail!(Format, "manifest line {line:?} should be `{key} <n>`"),
        }
    };
    let num_classes = field("num_classes")?;
    let count = field("count")?;
    let names: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if names.len() != count {
        bail!(Format, "manifest lists {} records but declares {count}", names.len());
    }
    let mut samples = Vec::with_capacity(count);
    for name in names {
        if name.contains('/') || name.contains("..") {
            bail!(Format, "record name {name:?} escapes the corpus directory");
        }
        let mut bytes = Vec::new();
        fs::File::open(dir.join(name))?.read_to_end(&mut bytes)?;
        let sample = decode_sample(&bytes)?;
        if sample.class_label >= num_classes.max(1) || sample.dense_label.iter().any(|&l| l as usize >= num_classes) {
            bail!(Format, "record {name} has labels outside {num_classes} classes");
        }
        samples.push(sample);
    }
    Ok(Corpus { num_classes, samples })
}
