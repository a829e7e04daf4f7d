//! Frozen-feature evaluation protocols.
//!
//! Every protocol reads encoder outputs only; parameters are borrowed
//! immutably and never bound as trainable.

mod correspond;
mod fidelity;
mod pca;
mod probe;
mod report;
mod runner;

use crate::distill::{adapt_tokens, AdapterHead};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub use correspond::{match_keypoint, pck_correspondence, upsample_bilinear, DenseView, KeypointPair, DEFAULT_PCK_THRESHOLD};
pub use fidelity::{token_fidelity, Fidelity, FidelityTarget};
pub use pca::{encode_ppm, pca_rgb, write_ppm, PcaProjection};
pub use probe::{
    linear_probe, mean_iou, ProbeConfig, ProbeMetrics, ProbeMode, ProbeTargets, LinearProbe,
};
pub use report::{EvalReport, EvalRow, REPORT_HEADER};
pub use runner::{
    patch_depths, patch_labels, run_protocols, split_indices, EvalSettings, Protocol, ZeroShotTeacher,
};

pub const DEFAULT_K: usize = 10;

/// Labeled features to search during KNN classification.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    /// `[M, d]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Free-form description of the encoder and resolution.
    pub source: String,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<usize>, source: &str) -> Result<Self> {
        if features.rank() != 2 {
            bail!(Dimension, "feature bank expects [M, d] features, got {:?}", features.shape());
        }
        if features.shape()[0] != labels.len() {
            bail!(Dimension, "feature bank has {} rows but {} labels", features.shape()[0], labels.len());
        }
        if !features.all_finite() {
            bail!(Parameter, "feature bank contains non-finite values");
        }
        Ok(FeatureBank { features, labels, source: source.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Majority vote among the `k` nearest bank rows by L2 distance.
///
/// Neighbors at equal distance are taken in bank order. Vote ties go to the
/// class with the smaller summed distance, then to the lower class id.
pub fn knn_classify(bank: &FeatureBank, query: &[f32], k: usize) -> Result<usize> {
    if bank.is_empty() {
        bail!(Parameter, "knn: feature bank is empty");
    }
    if k == 0 || k > bank.len() {
        bail!(Parameter, "knn: k must lie in 1..={}, got {k}", bank.len());
    }
    if query.len() != bank.dim() {
        bail!(Dimension, "knn: query has {} dims, bank has {}", query.len(), bank.dim());
    }
    let mut order: Vec<(f64, usize)> =
        (0..bank.len()).map(|i| (sq_dist(bank.features.row(i), query), i)).collect();
    order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);

    let mut votes: Vec<(usize, usize, f64)> = Vec::new();
    for &(d2, i) in &order {
        let label = bank.labels[i];
        let dist = d2.sqrt();
        match votes.iter_mut().find(|v| v.0 == label) {
            Some(v) => {
                v.1 += 1;
                v.2 += dist;
            }
            None => votes.push((label, 1, dist)),
        }
    }
    votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    Ok(votes[0].0)
}

/// Fraction of `queries` rows whose KNN prediction matches `labels`.
pub fn knn_accuracy(bank: &FeatureBank, queries: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if queries.rank() != 2 || queries.shape()[0] != labels.len() || labels.is_empty() {
        bail!(Dimension, "knn: {:?} queries for {} labels", queries.shape(), labels.len());
    }
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        if knn_classify(bank, queries.row(i), k)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-class unit vectors in teacher space standing in for text-tower
/// classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    /// `[C, d_T]`, rows L2-normalized.
    pub weights: Tensor,
    pub classes: Vec<usize>,
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

impl PrototypeMatrix {
    /// Normalizes the given rows; `classes[i]` names row `i`.
    pub fn new(rows: &Tensor, classes: Vec<usize>) -> Result<Self> {
        if rows.rank() != 2 || rows.shape()[0] != classes.len() || classes.is_empty() {
            bail!(Dimension, "prototypes: {:?} rows for {} classes", rows.shape(), classes.len());
        }
        let d = rows.shape()[1];
        let data = (0..classes.len()).flat_map(|i| l2_normalized(rows.row(i))).collect();
        Ok(PrototypeMatrix { weights: Tensor::new(vec![classes.len(), d], data)?, classes })
    }

    /// Mean token per class, in ascending class order, then normalized.
    pub fn from_class_means(tokens: &Tensor, labels: &[usize]) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != labels.len() || labels.is_empty() {
            bail!(Dimension, "prototypes: {:?} tokens for {} labels", tokens.shape(), labels.len());
        }
        let d = tokens.shape()[1];
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut data = Vec::with_capacity(classes.len() * d);
        for &c in &classes {
            let mut sum = vec![0.0f64; d];
            let mut n = 0usize;
            for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == c) {
                for (s, &v) in sum.iter_mut().zip(tokens.row(i)) {
                    *s += v as f64;
                }
                n += 1;
            }
            data.extend(sum.iter().map(|&s| (s / n as f64) as f32));
        }
        Self::new(&Tensor::new(vec![classes.len(), d], data)?, classes)
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Class whose prototype has the largest dot product with a unit vector in
/// the direction of `token`. Ties go to the earlier row.
pub fn prototype_classify(token: &[f32], prototypes: &PrototypeMatrix) -> Result<usize> {
    if token.len() != prototypes.dim() {
        bail!(Dimension, "zero-shot: token has {} dims, prototypes have {}", token.len(), prototypes.dim());
    }
    let q = l2_normalized(token);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &c) in prototypes.classes.iter().enumerate() {
        let s: f64 = prototypes.weights.row(i).iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum();
        if s > best.0 {
            best = (s, c);
        }
    }
    Ok(best.1)
}

/// Projects a student class token through `head` and classifies it against
/// teacher-space prototypes.
pub fn zeroshot_classify(class_token: &Tensor, head: &AdapterHead, prototypes: &PrototypeMatrix) -> Result<usize> {
    if class_token.rank() != 1 {
        bail!(Dimension, "zero-shot expects a [d] class token, got {:?}", class_token.shape());
    }
    if head.out_dim() != prototypes.dim() {
        bail!(Dimension, "adapter head outputs {} dims, prototypes have {}", head.out_dim(), prototypes.dim());
    }
    let adapted = adapt_tokens(head, class_token)?;
    prototype_classify(adapted.data(), prototypes)
}
