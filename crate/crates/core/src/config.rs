//! Declarative run configuration: one TOML document describes the corpus,
//! the teachers, the proxy and student encoders, every stage, evaluation
//! and visualization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{corpus_images, AugmentConfig, Sample, SyntheticSpec};
use crate::distill::LossWeights;
use crate::encoder::ViTConfig;
use crate::error::{bail, Error, Result};
use crate::eval::EvalSettings;
use crate::pipeline::{DataMix, DataRegistry, StageConfig, StageKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherEntry {
    pub name: String,
    pub encoder: ViTConfig,
    /// Seed used by `init` to create the toy teacher weights.
    #[serde(default)]
    pub init_seed: u64,
    /// Weight of this teacher's patch loss.
    #[serde(default = "one")]
    pub gamma: f32,
    /// Teacher checkpoint; `<out_dir>/teachers/<name>.ckpt` when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn one() -> f32 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSettings {
    /// Probability of drawing a whole batch from the curated set.
    pub homogeneous_prob: f64,
    /// Fraction of each class forming the curated set.
    pub curated_fraction: f64,
}

impl Default for MixSettings {
    fn default() -> Self {
        MixSettings { homogeneous_prob: 0.1, curated_fraction: 0.25 }
    }
}

/// Schedule and sizes of one stage; the encoder and teachers come from the
/// surrounding config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Training resolutions; the student's native size (or the pyramid for
    /// multi-resolution stages) when absent.
    #[serde(default)]
    pub resolutions: Option<Vec<usize>>,
    #[serde(default)]
    pub adapter_hidden: Option<usize>,
    #[serde(default = "default_calibration")]
    pub calibration_images: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_calibration() -> usize {
    512
}
fn default_checkpoint_every() -> usize {
    100
}

impl StageSettings {
    fn toy(total_steps: usize, base_lr: f64) -> Self {
        StageSettings {
            batch_size: 32,
            total_steps,
            base_lr,
            weight_decay: 1e-4,
            warmup_fraction: 0.02,
            resolutions: None,
            adapter_hidden: None,
            calibration_images: default_calibration(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeSettings {
    /// Number of corpus images rendered.
    pub images: usize,
    /// Resolutions used without `--multi-res`; the student's native size
    /// when empty.
    pub resolutions: Vec<usize>,
}

impl Default for VisualizeSettings {
    fn default() -> Self {
        VisualizeSettings { images: 4, resolutions: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: SyntheticSpec,
    /// Labeled corpus written by `init` for evaluation and visualization.
    #[serde(default = "default_eval_data")]
    pub eval_data: SyntheticSpec,
    #[serde(default)]
    pub datamix: MixSettings,
    #[serde(default = "default_teachers")]
    pub teachers: Vec<TeacherEntry>,
    #[serde(default = "default_proxy")]
    pub proxy: ViTConfig,
    #[serde(default = "default_student")]
    pub student: ViTConfig,
    /// Multi-resolution pyramid for stage 3 and stage 1+3.
    #[serde(default = "default_pyramid")]
    pub pyramid: Vec<usize>,
    #[serde(default = "default_stage1")]
    pub stage1: StageSettings,
    #[serde(default = "default_stage2")]
    pub stage2: StageSettings,
    #[serde(default = "default_stage3")]
    pub stage3: StageSettings,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub adam: AdamSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub visualize: VisualizeSettings,
}

fn vit(image_size: usize, dim: usize, depth: usize, heads: usize, num_registers: usize) -> ViTConfig {
    ViTConfig { image_size, patch_size: 8, dim, depth, heads, num_registers, mlp_ratio: 4.0 }
}

fn default_eval_data() -> SyntheticSpec {
    SyntheticSpec { images_per_class: 32, seed: 1, ..Default::default() }
}
fn default_teachers() -> Vec<TeacherEntry> {
    vec![
        TeacherEntry { name: "global".into(), encoder: vit(32, 48, 2, 4, 0), init_seed: 101, gamma: 1.0, checkpoint: None },
        TeacherEntry { name: "dense".into(), encoder: vit(48, 32, 2, 4, 0), init_seed: 102, gamma: 1.0, checkpoint: None },
    ]
}
fn default_proxy() -> ViTConfig {
    vit(32, 96, 4, 4, 4)
}
fn default_student() -> ViTConfig {
    vit(32, 32, 2, 4, 0)
}
fn default_pyramid() -> Vec<usize> {
    vec![32, 48, 64]
}
fn default_stage1() -> StageSettings {
    StageSettings::toy(1000, 1e-3)
}
fn default_stage2() -> StageSettings {
    StageSettings::toy(1000, 1e-3)
}
fn default_stage3() -> StageSettings {
    StageSettings::toy(300, 5e-4)
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.eval_data.validate()?;
        self.proxy.validate()?;
        self.student.validate()?;
        if self.teachers.is_empty() {
            bail!(Config, "at least one teacher is required");
        }
        for (i, t) in self.teachers.iter().enumerate() {
            t.encoder.validate()?;
            if self.teachers[..i].iter().any(|u| u.name == t.name) {
                bail!(Config, "duplicate teacher name {:?}", t.name);
            }
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                bail!(Config, "teacher name {:?} must be non-empty ASCII letters, digits, '-' or '_'", t.name);
            }
        }
        if !(0.0..=1.0).contains(&self.datamix.curated_fraction) {
            bail!(Config, "curated_fraction must lie in [0, 1]");
        }
        for stage in StageKind::ALL {
            let teachers = if stage.multi_teacher() { self.teachers.len() } else { 1 };
            self.stage_config(stage)?.validate(teachers)?;
        }
        Ok(())
    }

    pub fn teacher_checkpoint(&self, entry: &TeacherEntry, out_dir: &Path) -> PathBuf {
        entry.checkpoint.clone().unwrap_or_else(|| out_dir.join("teachers").join(format!("{}.ckpt", entry.name)))
    }

    pub fn teacher_stats_path(&self, name: &str, out_dir: &Path) -> PathBuf {
        out_dir.join("teachers").join(format!("{name}.stats"))
    }

    /// Resolved stage description. Stage 1 trains the proxy; every other
    /// stage trains the student. Stage 2-only uses the stage-2 schedule;
    /// stage 1+3 uses the stage-2 schedule over the pyramid.
    pub fn stage_config(&self, stage: StageKind) -> Result<StageConfig> {
        let (settings, student) = match stage {
            StageKind::Stage1 => (&self.stage1, &self.proxy),
            StageKind::Stage2 | StageKind::Stage2Only | StageKind::Stage1Plus3 => (&self.stage2, &self.student),
            StageKind::Stage3 => (&self.stage3, &self.student),
        };
        let resolutions = match &settings.resolutions {
            Some(r) if stage != StageKind::Stage1Plus3 => r.clone(),
            _ if stage.multi_resolution() => self.pyramid.clone(),
            _ => vec![student.image_size],
        };
        Ok(StageConfig {
            stage,
            student: student.clone(),
            resolutions,
            batch_size: settings.batch_size,
            total_steps: settings.total_steps,
            base_lr: settings.base_lr,
            weight_decay: settings.weight_decay,
            warmup_fraction: settings.warmup_fraction,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            seed: self.seed,
            datamix: DataMix { homogeneous_prob: self.datamix.homogeneous_prob, ..DataMix::default() },
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            adapter_hidden: settings.adapter_hidden,
            calibration_images: settings.calibration_images,
            checkpoint_every: settings.checkpoint_every,
        })
    }

    /// Registers the whole training corpus as the heterogeneous set and the
    /// first `curated_fraction` of every class as the homogeneous set.
    pub fn registry(&self, samples: &[Sample]) -> Result<DataRegistry> {
        let mix = DataMix::default();
        let per_class = self.data.images_per_class;
        let keep = ((per_class as f64 * self.datamix.curated_fraction).round() as usize).clamp(1, per_class);
        let curated: Vec<_> = samples
            .iter()
            .enumerate()
            .filter(|(i, _)| i % per_class < keep)
            .map(|(_, s)| s.image.clone())
            .collect();
        let mut r = DataRegistry::new();
        r.register(&mix.heterogeneous, corpus_images(samples))?;
        r.register(&mix.homogeneous, curated)?;
        Ok(r)
    }
}
