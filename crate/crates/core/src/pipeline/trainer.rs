use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, HeadRecord, RngStates};
use super::optim::{adamw_step, cosine_lr, AdamState};
use super::{sample_batch, select_scales, DataRegistry, StageConfig};
use crate::data::{augment, normalize_input, resize_image};
use crate::distill::{
    calibrate_stats, combine_terms, default_hidden, teacher_terms, AdapterHead, LossReport, TeacherBinding,
    TeacherStats, TeacherTargets,
};
use crate::encoder::{encode_batch, forward_tokens, EncoderParams};
use crate::error::{bail, Result};
use crate::rng::{self, StreamRng, StreamState};
use crate::tensor::{Tape, Tensor, Var};

pub const METRICS_HEADER: &str = "step,lr,teacher_id,class_loss,patch_loss,total";
const METRICS_FLUSH_EVERY: usize = 10;

const DATA_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const STUDENT_SCALE_STREAM: u64 = 3;
const TEACHER_SCALE_STREAM: u64 = 4;

struct Streams {
    data: StreamRng,
    augment: StreamRng,
    student_scale: StreamRng,
    teacher_scale: StreamRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            data: rng::stream(seed, DATA_STREAM),
            augment: rng::stream(seed, AUGMENT_STREAM),
            student_scale: rng::stream(seed, STUDENT_SCALE_STREAM),
            teacher_scale: rng::stream(seed, TEACHER_SCALE_STREAM),
        }
    }

    fn capture(&self, seed: u64) -> RngStates {
        RngStates {
            data: StreamState::capture(seed, &self.data),
            augment: StreamState::capture(seed, &self.augment),
            student_scale: StreamState::capture(seed, &self.student_scale),
            teacher_scale: StreamState::capture(seed, &self.teacher_scale),
        }
    }

    fn restore(s: &RngStates) -> Result<Self> {
        Ok(Streams {
            data: s.data.restore()?,
            augment: s.augment.restore()?,
            student_scale: s.student_scale.restore()?,
            teacher_scale: s.teacher_scale.restore()?,
        })
    }
}

/// Resizes and normalizes images for an encoder running at `size`.
pub(crate) fn prepare(images: &[Tensor], size: usize) -> Result<Vec<Tensor>> {
    images.iter().map(|im| normalize_input(&resize_image(im, size)?)).collect()
}

/// Raw teacher outputs for a batch, computed without gradients.
fn teacher_targets(teacher: &EncoderParams, inputs: &[Tensor]) -> Result<TeacherTargets> {
    let (class, patch, grid) = encode_batch(teacher, inputs)?;
    Ok(TeacherTargets { class, patch, grid })
}

/// In-memory training state for one stage.
pub struct Trainer {
    pub config: StageConfig,
    pub student: EncoderParams,
    pub bindings: Vec<TeacherBinding>,
    pub optimizer: AdamState,
    pub step: usize,
    /// Student and per-teacher input resolutions of the latest step.
    pub last_resolutions: (usize, Vec<usize>),
    streams: Streams,
}

impl Trainer {
    /// Fresh state. Every binding must already carry statistics.
    pub fn new(config: StageConfig, student: EncoderParams, bindings: Vec<TeacherBinding>) -> Result<Self> {
        config.validate(bindings.len())?;
        if student.config != config.student {
            bail!(Dimension, "student weights do not match the configured student encoder");
        }
        for b in &bindings {
            b.stats()?;
            for head in [&b.class_head, &b.patch_head] {
                if head.in_dim() != student.config.dim || head.out_dim() != b.teacher_dim() {
                    bail!(
                        Dimension,
                        "head for teacher {} maps {} -> {}, expected {} -> {}",
                        b.name,
                        head.in_dim(),
                        head.out_dim(),
                        student.config.dim,
                        b.teacher_dim()
                    );
                }
            }
        }
        let streams = Streams::new(config.seed);
        let mut t = Trainer { config, student, bindings, optimizer: AdamState { t: 0, m: vec![], v: vec![] }, step: 0, last_resolutions: (0, Vec::new()), streams };
        t.optimizer = AdamState::for_shapes(t.param_shapes().iter().map(|s| s.as_slice()));
        Ok(t)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = self.student.weights.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        for b in &self.bindings {
            for head in [&b.class_head, &b.patch_head] {
                shapes.extend(head.named().iter().map(|(_, t)| t.shape().to_vec()));
            }
        }
        shapes
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.student.weights.named_mut().into_iter().map(|(_, t)| t).collect();
        for b in &mut self.bindings {
            let TeacherBinding { class_head, patch_head, .. } = b;
            out.extend(class_head.named_mut().into_iter().map(|(_, t)| t));
            out.extend(patch_head.named_mut().into_iter().map(|(_, t)| t));
        }
        out
    }

    pub fn learning_rate(&self) -> f64 {
        cosine_lr(self.step, self.config.total_steps, self.config.base_lr, self.config.warmup_fraction)
    }

    /// Student and per-teacher resolutions for the next step.
    fn resolutions(&mut self) -> Result<(usize, Vec<usize>)> {
        if self.config.stage.multi_resolution() {
            let (s, t) = select_scales(
                &self.config.resolutions,
                &mut self.streams.student_scale,
                &mut self.streams.teacher_scale,
            )?;
            Ok((s, vec![t; self.bindings.len()]))
        } else {
            Ok((self.config.resolutions[0], self.bindings.iter().map(|b| b.native_resolution).collect()))
        }
    }

    /// One optimization step on a freshly sampled batch.
    pub fn train_step(&mut self, registry: &DataRegistry) -> Result<LossReport> {
        let lr = self.learning_rate();
        let batch = sample_batch(registry, &self.config.datamix, self.config.batch_size, &mut self.streams.data)?;
        let (s_res, t_res) = self.resolutions()?;
        let view = t_res.iter().copied().fold(s_res, usize::max);
        let views = batch
            .images
            .iter()
            .map(|im| {
                if self.config.augment.enabled {
                    augment(im, &mut self.streams.augment, &self.config.augment, view)
                } else {
                    resize_image(im, view)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let report = self.step_on(&views, s_res, &t_res, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Forward, loss, backward and update on already augmented views.
    fn step_on(&mut self, views: &[Tensor], s_res: usize, t_res: &[usize], lr: f64) -> Result<LossReport> {
        self.last_resolutions = (s_res, t_res.to_vec());
        let targets = self
            .bindings
            .iter()
            .zip(t_res)
            .map(|(b, &r)| teacher_targets(&b.teacher, &prepare(views, r)?))
            .collect::<Result<Vec<_>>>()?;
        let student_inputs = prepare(views, s_res)?;

        let mut tape = Tape::new();
        let sv = self.student.bind(&mut tape, true);
        let mut vars: Vec<Var> = sv.named().iter().map(|(_, v)| **v).collect();
        let heads: Vec<(AdapterHead<Var>, AdapterHead<Var>)> = self
            .bindings
            .iter()
            .map(|b| (b.class_head.bind(&mut tape, true), b.patch_head.bind(&mut tape, true)))
            .collect();
        for (c, p) in &heads {
            vars.extend(c.named().iter().map(|(_, v)| **v));
            vars.extend(p.named().iter().map(|(_, v)| **v));
        }
        let tokens = forward_tokens(&mut tape, &self.config.student, &sv, &student_inputs)?;
        let mut terms = Vec::with_capacity(self.bindings.len());
        for ((b, (c, p)), t) in self.bindings.iter().zip(&heads).zip(&targets) {
            terms.push(teacher_terms(&mut tape, b, (c, p), &tokens, t, &self.config.loss)?);
        }
        let (loss, report) = combine_terms(&mut tape, &self.bindings, &terms)?;
        if !report.total.is_finite() {
            bail!(State, "non-finite loss at step {}", self.step);
        }
        tape.backward(loss)?;

        let grads: Vec<Vec<f32>> = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
            .collect();
        drop(tape);
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let wd = self.config.weight_decay;
        let hyper = self.config.hyper();
        let decay: Vec<f64> = self.param_shapes().iter().map(|s| if s.len() >= 2 { wd } else { 0.0 }).collect();
        let mut optimizer = std::mem::replace(&mut self.optimizer, AdamState { t: 0, m: vec![], v: vec![] });
        let result = adamw_step(&mut self.params_mut(), &grad_refs, &mut optimizer, lr, &decay, hyper);
        self.optimizer = optimizer;
        result?;
        Ok(report)
    }

    /// Trains on a fixed set of already preprocessed-size images, skipping
    /// data sampling and augmentation. Used for overfitting checks.
    pub fn train_step_on(&mut self, images: &[Tensor]) -> Result<LossReport> {
        let lr = self.learning_rate();
        let (s_res, t_res) = self.resolutions()?;
        let report = self.step_on(images, s_res, &t_res, lr)?;
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: Some(self.config.stage),
            step: self.step,
            encoder: self.student.clone(),
            heads: self
                .bindings
                .iter()
                .map(|b| HeadRecord {
                    name: b.name.clone(),
                    gamma: b.gamma,
                    class_head: b.class_head.clone(),
                    patch_head: b.patch_head.clone(),
                    stats: b.stats.clone(),
                })
                .collect(),
            stage_config: Some(self.config.clone()),
            optimizer: Some(self.optimizer.clone()),
            rng: Some(self.streams.capture(self.config.seed)),
        }
    }

    /// Rebuilds a trainer from a mid-stage checkpoint and the teachers.
    pub fn restore(config: StageConfig, teachers: Vec<TeacherSource>, ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_encoder(&config.student)?;
        let (Some(optimizer), Some(rng_states)) = (ckpt.optimizer, ckpt.rng) else {
            bail!(State, "checkpoint has no optimizer or random-stream state to resume from");
        };
        if ckpt.heads.len() != teachers.len() {
            bail!(State, "checkpoint has heads for {} teachers, config has {}", ckpt.heads.len(), teachers.len());
        }
        let bindings = teachers
            .into_iter()
            .zip(ckpt.heads)
            .map(|(src, h)| TeacherBinding {
                name: src.name,
                native_resolution: src.params.config.image_size,
                teacher: src.params,
                class_head: h.class_head,
                patch_head: h.patch_head,
                stats: h.stats,
                gamma: h.gamma,
            })
            .collect();
        let mut t = Trainer::new(config, ckpt.encoder, bindings)?;
        if optimizer.len() != t.optimizer.len() {
            bail!(State, "optimizer state covers {} tensors, model has {}", optimizer.len(), t.optimizer.len());
        }
        t.optimizer = optimizer;
        t.streams = Streams::restore(&rng_states)?;
        t.step = ckpt.step;
        Ok(t)
    }
}

/// A frozen teacher as supplied to a stage, with optional pre-computed
/// statistics and heads.
#[derive(Clone, Debug)]
pub struct TeacherSource {
    pub name: String,
    pub params: EncoderParams,
    pub gamma: f32,
    pub stats: Option<TeacherStats>,
    pub heads: Option<(AdapterHead, AdapterHead)>,
}

impl TeacherSource {
    pub fn new(name: &str, params: EncoderParams) -> Self {
        TeacherSource { name: name.to_string(), params, gamma: 1.0, stats: None, heads: None }
    }
}

/// Everything a stage consumes besides its config and data.
#[derive(Clone, Debug, Default)]
pub struct StageInputs {
    pub teachers: Vec<TeacherSource>,
    /// Checkpoint the student starts from (stage 3); heads and statistics
    /// stored in it are reused when the teacher count matches.
    pub student_init: Option<Checkpoint>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from the last periodic checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many completed steps, leaving a resumable checkpoint.
    pub halt_after: Option<usize>,
}

/// `<dir>/<stage><suffix>`, e.g. `stage2.ckpt` or `stage2_metrics.csv`.
pub fn stage_file(dir: &Path, stage: super::StageKind, suffix: &str) -> PathBuf {
    dir.join(format!("{}{suffix}", stage.name()))
}

/// Buffered metrics CSV, flushed every ten steps.
pub struct MetricsLog {
    path: PathBuf,
    pending: String,
    rows_since_flush: usize,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        fs::write(path, format!("{METRICS_HEADER}\n"))?;
        Ok(MetricsLog { path: path.to_path_buf(), pending: String::new(), rows_since_flush: 0 })
    }

    /// Reopens an existing log, dropping rows for steps `>= from_step`.
    pub fn resume(path: &Path, from_step: usize) -> Result<Self> {
        let text = fs::read_to_string(path).unwrap_or_default();
        let mut kept = format!("{METRICS_HEADER}\n");
        for line in text.lines().skip(1) {
            let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if matches!(step, Some(s) if s < from_step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, kept)?;
        Ok(MetricsLog { path: path.to_path_buf(), pending: String::new(), rows_since_flush: 0 })
    }

    pub fn record(&mut self, step: usize, lr: f64, names: &[&str], report: &LossReport) -> Result<()> {
        for (name, t) in names.iter().zip(&report.teachers) {
            self.pending.push_str(&format!(
                "{step},{lr:e},{name},{},{},{}\n",
                t.class_loss, t.patch_loss, report.total
            ));
        }
        self.rows_since_flush += 1;
        if self.rows_since_flush >= METRICS_FLUSH_EVERY {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if !self.pending.is_empty() {
            let mut f = fs::OpenOptions::new().append(true).open(&self.path)?;
            f.write_all(self.pending.as_bytes())?;
            self.pending.clear();
        }
        self.rows_since_flush = 0;
        Ok(())
    }
}

/// The first `calibration_images` heterogeneous images, cycled if the set is
/// smaller.
pub fn calibration_set(registry: &DataRegistry, config: &StageConfig) -> Result<Vec<Tensor>> {
    let pool = registry.get(&config.datamix.heterogeneous)?;
    Ok((0..config.calibration_images).map(|i| pool[i % pool.len()].clone()).collect())
}

/// Statistics of `teacher` at its native resolution.
pub fn calibrate_teacher(teacher: &EncoderParams, images: &[Tensor]) -> Result<TeacherStats> {
    let inputs = prepare(images, teacher.config.image_size)?;
    calibrate_stats(teacher, &inputs)
}

fn build_bindings(config: &StageConfig, inputs: &StageInputs, registry: &DataRegistry, student_dim: usize) -> Result<Vec<TeacherBinding>> {
    let carried: Option<&Vec<HeadRecord>> =
        inputs.student_init.as_ref().map(|c| &c.heads).filter(|h| h.len() == inputs.teachers.len());
    let mut calibration: Option<Vec<Tensor>> = None;
    let mut bindings = Vec::with_capacity(inputs.teachers.len());
    for (i, src) in inputs.teachers.iter().enumerate() {
        let d_t = src.params.config.dim;
        let hidden = config.adapter_hidden.unwrap_or_else(|| default_hidden(student_dim, d_t));
        let mut b = TeacherBinding::new(&src.name, src.params.clone(), student_dim, hidden, config.seed, i as u64);
        b.gamma = src.gamma;
        let carried_head = carried.map(|h| &h[i]).filter(|h| {
            h.class_head.in_dim() == student_dim && h.class_head.out_dim() == d_t
        });
        if let Some((c, p)) = &src.heads {
            b.class_head = c.clone();
            b.patch_head = p.clone();
        } else if let Some(h) = carried_head {
            b.class_head = h.class_head.clone();
            b.patch_head = h.patch_head.clone();
        }
        b.stats = match (&src.stats, carried_head.and_then(|h| h.stats.clone())) {
            (Some(s), _) => Some(s.clone()),
            (None, Some(s)) => Some(s),
            (None, None) => {
                if calibration.is_none() {
                    calibration = Some(calibration_set(registry, config)?);
                }
                Some(calibrate_teacher(&src.params, calibration.as_ref().unwrap())?)
            }
        };
        if let Some(s) = &b.stats {
            if s.dim() != d_t {
                bail!(Dimension, "statistics for teacher {} have width {}, teacher has {d_t}", src.name, s.dim());
            }
        }
        bindings.push(b);
    }
    Ok(bindings)
}

/// Runs (or resumes) one stage, writing periodic and final checkpoints and
/// the metrics CSV into `out_dir`.
pub fn run_stage(
    config: &StageConfig,
    inputs: StageInputs,
    registry: &DataRegistry,
    out_dir: &Path,
    options: RunOptions,
) -> Result<Checkpoint> {
    config.validate(inputs.teachers.len())?;
    if config.stage == super::StageKind::Stage3 && inputs.student_init.is_none() {
        bail!(State, "stage3 starts from the stage2 checkpoint, which was not provided");
    }
    fs::create_dir_all(out_dir)?;
    let last = stage_file(out_dir, config.stage, ".last.ckpt");
    let metrics_path = stage_file(out_dir, config.stage, "_metrics.csv");

    let (mut trainer, mut log) = if options.resume && last.exists() {
        let ckpt = load_checkpoint(&last)?;
        if ckpt.stage_config.as_ref() != Some(config) {
            bail!(State, "{} was written with a different stage config", last.display());
        }
        let step = ckpt.step;
        (Trainer::restore(config.clone(), inputs.teachers, ckpt)?, MetricsLog::resume(&metrics_path, step)?)
    } else {
        let student = match &inputs.student_init {
            Some(init) => {
                init.check_encoder(&config.student)?;
                init.encoder.clone()
            }
            None => EncoderParams::init(&config.student, config.seed)?,
        };
        let bindings = build_bindings(config, &inputs, registry, config.student.dim)?;
        (Trainer::new(config.clone(), student, bindings)?, MetricsLog::create(&metrics_path)?)
    };

    let names: Vec<String> = trainer.bindings.iter().map(|b| b.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    while trainer.step < config.total_steps {
        if options.halt_after == Some(trainer.step) {
            log.flush()?;
            let ckpt = trainer.checkpoint();
            save_checkpoint(&last, &ckpt)?;
            return Ok(ckpt);
        }
        let step = trainer.step;
        let lr = trainer.learning_rate();
        let report = trainer.train_step(registry)?;
        log.record(step, lr, &names, &report)?;
        if trainer.step % config.checkpoint_every == 0 {
            log.flush()?;
            save_checkpoint(&last, &trainer.checkpoint())?;
        }
    }
    log.flush()?;
    let ckpt = trainer.checkpoint();
    save_checkpoint(&stage_file(out_dir, config.stage, ".ckpt"), &ckpt)?;
    Ok(ckpt)
}
