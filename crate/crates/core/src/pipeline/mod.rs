//! Stage orchestration: data-mix sampling, scale selection, optimization,
//! checkpoints and metrics.

mod checkpoint;
mod optim;
mod trainer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::distill::LossWeights;
use crate::encoder::ViTConfig;
use crate::error::{bail, Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, HeadRecord, RngStates, CHECKPOINT_VERSION};
pub use optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
pub use trainer::{
    calibrate_teacher, calibration_set, run_stage, stage_file, MetricsLog, RunOptions, StageInputs, TeacherSource, Trainer, METRICS_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageKind {
    /// Multi-teacher distillation into the proxy.
    #[serde(rename = "stage1")]
    Stage1,
    /// Proxy to student at one fixed resolution.
    #[serde(rename = "stage2")]
    Stage2,
    /// Proxy to student over a resolution pyramid, starting from stage 2.
    #[serde(rename = "stage3")]
    Stage3,
    /// Multi-teacher distillation straight into the student.
    #[serde(rename = "stage2-only")]
    Stage2Only,
    /// Multi-resolution distillation from the proxy into a fresh student.
    #[serde(rename = "stage1+3")]
    Stage1Plus3,
}

impl StageKind {
    pub const ALL: [StageKind; 5] =
        [StageKind::Stage1, StageKind::Stage2, StageKind::Stage3, StageKind::Stage2Only, StageKind::Stage1Plus3];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Stage1 => "stage1",
            StageKind::Stage2 => "stage2",
            StageKind::Stage3 => "stage3",
            StageKind::Stage2Only => "stage2-only",
            StageKind::Stage1Plus3 => "stage1+3",
        }
    }

    pub fn multi_resolution(self) -> bool {
        matches!(self, StageKind::Stage3 | StageKind::Stage1Plus3)
    }

    /// Stages that distill the raw foundation teachers rather than the proxy.
    pub fn multi_teacher(self) -> bool {
        matches!(self, StageKind::Stage1 | StageKind::Stage2Only)
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(StageKind::Stage1),
            "2" | "stage2" => Ok(StageKind::Stage2),
            "3" | "stage3" => Ok(StageKind::Stage3),
            "stage2-only" => Ok(StageKind::Stage2Only),
            "stage1+3" => Ok(StageKind::Stage1Plus3),
            _ => bail!(Config, "unknown stage {s:?}; expected 1, 2, 3, stage2-only or stage1+3"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataMix {
    /// Probability that a whole batch is drawn from the homogeneous set.
    pub homogeneous_prob: f64,
    pub homogeneous: String,
    pub heterogeneous: String,
}

impl Default for DataMix {
    fn default() -> Self {
        DataMix { homogeneous_prob: 0.1, homogeneous: "curated".into(), heterogeneous: "web".into() }
    }
}

/// Named image-only datasets available to the sampler.
#[derive(Clone, Debug, Default)]
pub struct DataRegistry {
    sets: BTreeMap<String, Vec<Tensor>>,
}

impl DataRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, images: Vec<Tensor>) -> Result<()> {
        if images.is_empty() {
            bail!(Config, "dataset {name:?} is empty");
        }
        self.sets.insert(name.to_string(), images);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[Tensor]> {
        match self.sets.get(name) {
            Some(s) => Ok(s),
            None => bail!(Config, "dataset {name:?} is not registered"),
        }
    }
}

/// A batch of images and whether it came from the homogeneous set.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub homogeneous: bool,
}

/// Per-batch choice between the two sets, then `batch_size` uniform draws
/// (with replacement) from the chosen set.
pub fn sample_batch(registry: &DataRegistry, mix: &DataMix, batch_size: usize, rng: &mut StreamRng) -> Result<Batch> {
    let homo = registry.get(&mix.homogeneous)?;
    let hetero = registry.get(&mix.heterogeneous)?;
    let homogeneous = rng.random::<f64>() < mix.homogeneous_prob;
    let set = if homogeneous { homo } else { hetero };
    let images = (0..batch_size).map(|_| set[rng.random_range(0..set.len())].clone()).collect();
    Ok(Batch { images, homogeneous })
}

/// Independent uniform draws of the student and teacher scales.
pub fn select_scales(pyramid: &[usize], student: &mut StreamRng, teacher: &mut StreamRng) -> Result<(usize, usize)> {
    if pyramid.is_empty() {
        bail!(Parameter, "resolution pyramid is empty");
    }
    let s = pyramid[student.random_range(0..pyramid.len())];
    let t = pyramid[teacher.random_range(0..pyramid.len())];
    Ok((s, t))
}

/// Declarative description of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub student: ViTConfig,
    /// One entry for fixed-resolution stages, the pyramid otherwise.
    pub resolutions: Vec<usize>,
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub datamix: DataMix,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Adapter hidden width; `4 * max(d_S, d_T)` when absent.
    #[serde(default)]
    pub adapter_hidden: Option<usize>,
    /// Images used to calibrate teacher statistics.
    #[serde(default = "default_calibration_images")]
    pub calibration_images: usize,
    /// Steps between resumable checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_calibration_images() -> usize {
    512
}
fn default_checkpoint_every() -> usize {
    100
}

impl StageConfig {
    /// Toy-scale defaults for `stage`.
    pub fn toy(stage: StageKind, student: ViTConfig) -> Self {
        let base = student.image_size;
        let resolutions = if stage.multi_resolution() { vec![base, base * 3 / 2, base * 2] } else { vec![base] };
        StageConfig {
            stage,
            student,
            resolutions,
            batch_size: 32,
            total_steps: 1000,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            warmup_fraction: 0.02,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
            datamix: DataMix::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            adapter_hidden: None,
            calibration_images: default_calibration_images(),
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    /// Checks the config on its own and against the number of teachers.
    pub fn validate(&self, teachers: usize) -> Result<()> {
        self.student.validate()?;
        let n = self.resolutions.len();
        if self.stage.multi_resolution() {
            if n < 2 {
                bail!(Config, "{} needs at least two resolutions, got {n}", self.stage);
            }
        } else if n != 1 {
            bail!(Config, "{} uses exactly one resolution, got {n}", self.stage);
        }
        for &r in &self.resolutions {
            if r == 0 || r % self.student.patch_size != 0 {
                bail!(Config, "resolution {r} is not a multiple of the student patch size {}", self.student.patch_size);
            }
        }
        if self.stage.multi_teacher() {
            if teachers == 0 {
                bail!(Config, "{} needs at least one teacher", self.stage);
            }
        } else if teachers != 1 {
            bail!(Config, "{} distills from exactly one teacher (the proxy), got {teachers}", self.stage);
        }
        if !(0.0..=1.0).contains(&self.datamix.homogeneous_prob) {
            bail!(Config, "homogeneous_prob must lie in [0, 1], got {}", self.datamix.homogeneous_prob);
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            bail!(Config, "batch_size and total_steps must be positive");
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            bail!(Config, "learning rate, weight decay and warmup fraction must be non-negative (warmup < 1)");
        }
        if self.checkpoint_every == 0 || self.calibration_images == 0 {
            bail!(Config, "checkpoint_every and calibration_images must be positive");
        }
        self.augment.validate()
    }
}
