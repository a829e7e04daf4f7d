use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::pipeline::{adamw_step, cosine_lr, AdamHyper, AdamState};
use crate::rng;
use crate::tensor::{Tape, Tensor};

const FEATURE_STD_FLOOR: f64 = 1e-6;
const PROBE_STREAM: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Classify,
    Regress,
}

/// Labels for a classification probe or `[M, t]` values for regression.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeTargets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Tensor),
}

impl ProbeTargets {
    fn len(&self) -> usize {
        match self {
            ProbeTargets::Classes { labels, .. } => labels.len(),
            ProbeTargets::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Feature rows per step.
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1e-2, weight_decay: 1e-3, steps: 1000, batch_size: 256 }
    }
}

/// A single linear layer over standardized frozen features.
///
/// The fixed per-feature standardization plays the role of a batch-norm
/// layer in inference mode. Regression targets are standardized the same
/// way and mapped back on prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mode: ProbeMode,
    pub feature_mean: Vec<f32>,
    pub feature_std: Vec<f32>,
    /// `[d, out]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub target_mean: Vec<f32>,
    pub target_std: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeMetrics {
    Classify { accuracy: f64, miou: f64 },
    Regress { rmse: f64 },
}

fn column_moments(data: &[f32], cols: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = data.len() / cols;
    let mut mean = vec![0.0f64; cols];
    for r in data.chunks(cols) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; cols];
    for r in data.chunks(cols) {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|&s| (s / rows as f64).sqrt().max(FEATURE_STD_FLOOR) as f32).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

fn standardize(data: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    let cols = mean.len();
    data.chunks(cols)
        .flat_map(|r| r.iter().zip(mean).zip(std).map(|((&v, &m), &s)| (v - m) / s))
        .collect()
}

fn gather_rows(data: &[f32], cols: usize, idx: &[usize]) -> Vec<f32> {
    idx.iter().flat_map(|&i| data[i * cols..(i + 1) * cols].iter().copied()).collect()
}

/// Trains a linear probe on frozen `[M, d]` features with AdamW and a
/// cosine schedule. Minibatches are drawn with replacement from a stream
/// seeded by `seed`.
pub fn linear_probe(
    features: &Tensor,
    targets: &ProbeTargets,
    mode: ProbeMode,
    config: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    match (mode, targets) {
        (ProbeMode::Classify, ProbeTargets::Classes { .. }) | (ProbeMode::Regress, ProbeTargets::Values(_)) => {}
        _ => bail!(Contract, "probe mode {mode:?} does not match the kind of targets supplied"),
    }
    if features.rank() != 2 || features.shape()[0] == 0 {
        bail!(Dimension, "probe expects non-empty [M, d] features, got {:?}", features.shape());
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    if targets.len() != m {
        bail!(Dimension, "probe has {m} feature rows but {} targets", targets.len());
    }
    if config.steps == 0 || config.batch_size == 0 {
        bail!(Config, "probe steps and batch_size must be positive");
    }
    let (feature_mean, feature_std) = column_moments(features.data(), d);
    let x_all = standardize(features.data(), &feature_mean, &feature_std);

    let (out, y_all, target_mean, target_std) = match targets {
        ProbeTargets::Classes { labels, num_classes } => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                bail!(Parameter, "class label {bad} out of range for {num_classes} classes");
            }
            (*num_classes, Vec::new(), Vec::new(), Vec::new())
        }
        ProbeTargets::Values(t) => {
            if t.rank() != 2 {
                bail!(Dimension, "regression targets must be [M, t], got {:?}", t.shape());
            }
            let cols = t.shape()[1];
            let (mean, std) = column_moments(t.data(), cols);
            (cols, standardize(t.data(), &mean, &std), mean, std)
        }
    };

    let mut weight = Tensor::zeros(vec![d, out]);
    let mut bias = Tensor::zeros(vec![out]);
    let mut state = AdamState::for_shapes([weight.shape(), bias.shape()]);
    let decay = [config.weight_decay, 0.0];
    let mut rng = rng::stream(seed, PROBE_STREAM);
    let bs = config.batch_size.min(m);
    for step in 0..config.steps {
        let idx: Vec<usize> = if bs == m { (0..m).collect() } else { (0..bs).map(|_| rng.random_range(0..m)).collect() };
        let mut tape = Tape::new();
        let w = tape.param(weight.clone());
        let b = tape.param(bias.clone());
        let x = tape.constant(Tensor::new(vec![bs, d], gather_rows(&x_all, d, &idx))?);
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_tiled(logits, b)?;
        let loss = match targets {
            ProbeTargets::Classes { labels, .. } => {
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                tape.cross_entropy(logits, &y)?
            }
            ProbeTargets::Values(_) => {
                let y = tape.constant(Tensor::new(vec![bs, out], gather_rows(&y_all, out, &idx))?);
                tape.mse_loss(logits, y)?
            }
        };
        tape.backward(loss)?;
        let gw = tape.grad(w).unwrap_or_default().to_vec();
        let gb = tape.grad(b).unwrap_or_default().to_vec();
        let lr = cosine_lr(step, config.steps, config.lr, 0.0);
        adamw_step(&mut [&mut weight, &mut bias], &[&gw, &gb], &mut state, lr, &decay, AdamHyper::default())?;
    }
    Ok(LinearProbe { mode, feature_mean, feature_std, weight, bias, target_mean, target_std })
}

impl LinearProbe {
    pub fn outputs(&self) -> usize {
        self.bias.numel()
    }

    /// Raw linear outputs (logits, or regression values in target units).
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.feature_mean.len();
        if features.rank() != 2 || features.shape()[1] != d {
            bail!(Dimension, "probe expects [M, {d}] features, got {:?}", features.shape());
        }
        let m = features.shape()[0];
        let x = standardize(features.data(), &self.feature_mean, &self.feature_std);
        let out = self.outputs();
        let mut y = vec![0.0f32; m * out];
        for (r, row) in x.chunks(d).enumerate() {
            for (o, slot) in y[r * out..(r + 1) * out].iter_mut().enumerate() {
                let mut s = self.bias.data()[o] as f64;
                for (k, &v) in row.iter().enumerate() {
                    s += v as f64 * self.weight.data()[k * out + o] as f64;
                }
                *slot = if self.mode == ProbeMode::Regress {
                    (s * self.target_std[o] as f64 + self.target_mean[o] as f64) as f32
                } else {
                    s as f32
                };
            }
        }
        Tensor::new(vec![m, out], y)
    }

    /// Argmax class per row; ties go to the lower class id.
    pub fn classify(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    pub fn evaluate(&self, features: &Tensor, targets: &ProbeTargets) -> Result<ProbeMetrics> {
        match (self.mode, targets) {
            (ProbeMode::Classify, ProbeTargets::Classes { labels, num_classes }) => {
                let pred = self.classify(features)?;
                if pred.len() != labels.len() {
                    bail!(Dimension, "{} predictions for {} labels", pred.len(), labels.len());
                }
                let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
                let accuracy = hits as f64 / labels.len().max(1) as f64;
                Ok(ProbeMetrics::Classify { accuracy, miou: mean_iou(&pred, labels, *num_classes)? })
            }
            (ProbeMode::Regress, ProbeTargets::Values(t)) => {
                let pred = self.predict(features)?;
                if pred.shape() != t.shape() {
                    bail!(Dimension, "predictions {:?} vs targets {:?}", pred.shape(), t.shape());
                }
                let se: f64 = pred.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                Ok(ProbeMetrics::Regress { rmse: (se / t.numel().max(1) as f64).sqrt() })
            }
            _ => bail!(Contract, "probe mode {:?} does not match the kind of targets supplied", self.mode),
        }
    }
}

/// Mean intersection-over-union over the classes present in either the
/// prediction or the reference.
pub fn mean_iou(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        bail!(Dimension, "{} predictions for {} labels", pred.len(), truth.len());
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            bail!(Parameter, "label out of range for {num_classes} classes");
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> =
        inter.iter().zip(&union).filter(|(_, &u)| u > 0).map(|(&i, &u)| i as f64 / u as f64).collect();
    if present.is_empty() {
        bail!(Parameter, "mean IoU of an empty label set");
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
