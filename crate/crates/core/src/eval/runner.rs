use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::*;
use crate::data::{normalize_input, resize_image, Corpus, Sample};
use crate::encoder::{encode, EncoderOutput, EncoderParams};
use crate::error::{bail, Error, Result};
use crate::pipeline::HeadRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    Knn,
    ZeroShot,
    /// Dense linear probes: segmentation and depth.
    Probe,
    Pck,
    Pca,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [Protocol::Knn, Protocol::ZeroShot, Protocol::Probe, Protocol::Pck, Protocol::Pca];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Knn => "knn",
            Protocol::ZeroShot => "zeroshot",
            Protocol::Probe => "probe",
            Protocol::Pck => "pck",
            Protocol::Pca => "pca",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Protocol::ALL.iter().find(|p| p.name() == s) {
            Some(&p) => Ok(p),
            None => {
                let names: Vec<&str> = Protocol::ALL.iter().map(|p| p.name()).collect();
                bail!(Config, "unknown protocol {s:?}; valid protocols: {}", names.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Neighbors in the KNN vote.
    pub k: usize,
    /// PCK radius as a fraction of the larger target bounding-box side.
    pub pck_threshold: f64,
    pub pck_pairs_per_class: usize,
    /// Input resolution; the encoder's native size when absent.
    pub resolution: Option<usize>,
    /// Every `holdout_every`-th sample is held out for testing.
    pub holdout_every: usize,
    pub seg_probe: ProbeConfig,
    pub depth_probe: ProbeConfig,
    /// Head record whose class head projects into the zero-shot teacher.
    pub zeroshot_head: Option<String>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: DEFAULT_K,
            pck_threshold: DEFAULT_PCK_THRESHOLD,
            pck_pairs_per_class: 100,
            resolution: None,
            holdout_every: 5,
            seg_probe: ProbeConfig::default(),
            depth_probe: ProbeConfig::default(),
            zeroshot_head: None,
        }
    }
}

/// Teacher encoder and the head record that maps student class tokens into
/// its (normalized) feature space.
#[derive(Clone, Copy, Debug)]
pub struct ZeroShotTeacher<'a> {
    pub teacher: &'a EncoderParams,
    pub head: &'a HeadRecord,
}

/// `(train, test)` sample indices.
pub fn split_indices(n: usize, holdout_every: usize) -> (Vec<usize>, Vec<usize>) {
    let every = holdout_every.max(2);
    (0..n).partition(|&i| i % every != every - 1)
}

fn cell_of(sample: &Sample, grid: (usize, usize)) -> impl Fn(usize, usize) -> usize {
    let (h, w) = (sample.height(), sample.width());
    let (rows, cols) = grid;
    move |y, x| (y * rows / h) * cols + x * cols / w
}

/// Majority dense label under each token cell; ties go to the lower label.
pub fn patch_labels(sample: &Sample, grid: (usize, usize), num_classes: usize) -> Vec<usize> {
    let cell = cell_of(sample, grid);
    let mut counts = vec![vec![0usize; num_classes]; grid.0 * grid.1];
    for y in 0..sample.height() {
        for x in 0..sample.width() {
            let l = sample.dense_label[y * sample.width() + x] as usize;
            counts[cell(y, x)][l.min(num_classes - 1)] += 1;
        }
    }
    counts.iter().map(|c| (0..num_classes).fold(0, |b, k| if c[k] > c[b] { k } else { b })).collect()
}

/// Mean depth under each token cell.
pub fn patch_depths(sample: &Sample, grid: (usize, usize)) -> Vec<f32> {
    let cell = cell_of(sample, grid);
    let mut sum = vec![0.0f64; grid.0 * grid.1];
    let mut n = vec![0usize; grid.0 * grid.1];
    for y in 0..sample.height() {
        for x in 0..sample.width() {
            let c = cell(y, x);
            sum[c] += sample.depth_map.data()[y * sample.width() + x] as f64;
            n[c] += 1;
        }
    }
    sum.iter().zip(&n).map(|(&s, &k)| (s / k.max(1) as f64) as f32).collect()
}

fn prepared(samples: &[Sample], idx: &[usize], size: usize) -> Result<Vec<Tensor>> {
    idx.iter().map(|&i| normalize_input(&resize_image(&samples[i].image, size)?)).collect()
}

fn stack(rows: impl Iterator<Item = Vec<f32>>, d: usize) -> Result<Tensor> {
    let data: Vec<f32> = rows.flatten().collect();
    Tensor::new(vec![data.len() / d.max(1), d], data)
}

fn bbox_max(sample: &Sample) -> Option<f32> {
    let w = sample.width();
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, &l) in sample.dense_label.iter().enumerate() {
        if l != 0 {
            let (x, y) = (i % w, i / w);
            b = Some(match b {
                None => (x, x, y, y),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
            });
        }
    }
    b.map(|(x0, x1, y0, y1)| ((x1 - x0 + 1).max(y1 - y0 + 1)) as f32)
}

/// Runs `protocols` on `student` over a labeled corpus split into train and
/// held-out parts, in the order given.
pub fn run_protocols(
    student: &EncoderParams,
    corpus: &Corpus,
    protocols: &[Protocol],
    settings: &EvalSettings,
    zeroshot: Option<ZeroShotTeacher>,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let samples = &corpus.samples;
    let (train, test) = split_indices(samples.len(), settings.holdout_every);
    if train.is_empty() || test.is_empty() {
        bail!(Parameter, "corpus of {} samples is too small to split", samples.len());
    }
    let size = settings.resolution.unwrap_or(student.config.image_size);
    let train_out = encode(student, &prepared(samples, &train, size)?)?;
    let test_out = encode(student, &prepared(samples, &test, size)?)?;
    let d = student.config.dim;
    let classes = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| samples[i].class_label).collect() };
    let class_matrix = |out: &[EncoderOutput]| stack(out.iter().map(|o| o.class_token.data().to_vec()), d);
    let patch_matrix = |out: &[EncoderOutput]| stack(out.iter().map(|o| o.patch_tokens.data().to_vec()), d);

    let mut report = EvalReport::new(seed, config_hash);
    for &protocol in protocols {
        match protocol {
            Protocol::Knn => {
                let bank = FeatureBank::new(class_matrix(&train_out)?, classes(&train), &format!("student@{size}"))?;
                let acc = knn_accuracy(&bank, &class_matrix(&test_out)?, &classes(&test), settings.k.min(bank.len()))?;
                report.push("knn", "top1_accuracy", acc);
            }
            Protocol::ZeroShot => {
                let Some(zs) = zeroshot else {
                    bail!(State, "zero-shot evaluation needs a teacher and a head binding");
                };
                let tsize = zs.teacher.config.image_size;
                let t_out = encode(zs.teacher, &prepared(samples, &train, tsize)?)?;
                let mut t_class = class_matrix_of(&t_out)?;
                if let Some(stats) = &zs.head.stats {
                    t_class = stats.normalize_class(&t_class)?;
                }
                let protos = PrototypeMatrix::from_class_means(&t_class, &classes(&train))?;
                let truth = classes(&test);
                let mut hits = 0;
                for (o, &y) in test_out.iter().zip(&truth) {
                    if zeroshot_classify(&o.class_token, &zs.head.class_head, &protos)? == y {
                        hits += 1;
                    }
                }
                report.push("zeroshot", "top1_accuracy", hits as f64 / truth.len() as f64);
            }
            Protocol::Probe => {
                let grid = train_out[0].grid;
                let labels = |idx: &[usize]| -> Vec<usize> {
                    idx.iter().flat_map(|&i| patch_labels(&samples[i], grid, corpus.num_classes)).collect()
                };
                let depths = |idx: &[usize]| -> Result<Tensor> {
                    let v: Vec<f32> = idx.iter().flat_map(|&i| patch_depths(&samples[i], grid)).collect();
                    Tensor::new(vec![v.len(), 1], v)
                };
                let (xtr, xte) = (patch_matrix(&train_out)?, patch_matrix(&test_out)?);
                let seg_train = ProbeTargets::Classes { labels: labels(&train), num_classes: corpus.num_classes };
                let seg_test = ProbeTargets::Classes { labels: labels(&test), num_classes: corpus.num_classes };
                let seg = linear_probe(&xtr, &seg_train, ProbeMode::Classify, &settings.seg_probe, seed)?;
                if let ProbeMetrics::Classify { accuracy, miou } = seg.evaluate(&xte, &seg_test)? {
                    report.push("probe", "seg_miou", miou);
                    report.push("probe", "seg_accuracy", accuracy);
                }
                let depth = linear_probe(&xtr, &ProbeTargets::Values(depths(&train)?), ProbeMode::Regress, &settings.depth_probe, seed)?;
                if let ProbeMetrics::Regress { rmse } = depth.evaluate(&xte, &ProbeTargets::Values(depths(&test)?))? {
                    report.push("probe", "depth_rmse", rmse);
                }
            }
            Protocol::Pck => {
                let (hits, total) = pck_over_pairs(samples, &test, &test_out, settings)?;
                if total == 0 {
                    bail!(Parameter, "pck: held-out split has no same-class image pairs with keypoints");
                }
                report.push("pck", &format!("pck@{}", settings.pck_threshold), hits / total as f64);
            }
            Protocol::Pca => {
                let mut sum = 0.0;
                for o in &test_out {
                    sum += pca_rgb(&o.patch_tokens, o.grid)?.explained_top3();
                }
                report.push("pca", "top3_explained", sum / test_out.len() as f64);
            }
        }
    }
    Ok(report)
}

fn class_matrix_of(out: &[EncoderOutput]) -> Result<Tensor> {
    let d = out.first().map(|o| o.class_token.numel()).unwrap_or(0);
    stack(out.iter().map(|o| o.class_token.data().to_vec()), d)
}

/// Consecutive same-class held-out pairs, keypoints matched by id. Returns
/// the number of correct keypoints (as f64) and the keypoint count.
fn pck_over_pairs(
    samples: &[Sample],
    test: &[usize],
    outputs: &[EncoderOutput],
    settings: &EvalSettings,
) -> Result<(f64, usize)> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, &i) in test.iter().enumerate() {
        if !samples[i].keypoints.is_empty() {
            by_class.entry(samples[i].class_label).or_default().push(k);
        }
    }
    let mut hits = 0.0;
    let mut total = 0;
    for members in by_class.values() {
        for win in members.windows(2).take(settings.pck_pairs_per_class) {
            let (a, b) = (win[0], win[1]);
            let (sa, sb) = (&samples[test[a]], &samples[test[b]]);
            let pairs: Vec<KeypointPair> = sa
                .keypoints
                .iter()
                .filter_map(|ka| {
                    sb.keypoints.iter().find(|kb| kb.id == ka.id).map(|kb| KeypointPair { src: (ka.x, ka.y), tgt: (kb.x, kb.y) })
                })
                .collect();
            let Some(bbox) = bbox_max(sb) else { continue };
            if pairs.is_empty() {
                continue;
            }
            let src = DenseView { tokens: &outputs[a].patch_tokens, grid: outputs[a].grid, height: sa.height(), width: sa.width() };
            let tgt = DenseView { tokens: &outputs[b].patch_tokens, grid: outputs[b].grid, height: sb.height(), width: sb.width() };
            let score = pck_correspondence(&src, &tgt, &pairs, bbox, settings.pck_threshold)?;
            hits += score * pairs.len() as f64;
            total += pairs.len();
        }
    }
    Ok((hits, total))
}
