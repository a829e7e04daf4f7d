//! Per-teacher distillation flow: adapter heads, fixed teacher-feature
//! normalization, spatial alignment and the token losses.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderOutput, EncoderParams, TokenBatch, LAYER_NORM_EPS};
use crate::error::{bail, Result};
use crate::rng::{self, trunc_normal};
use crate::tensor::{bicubic_resize, Tape, Tensor, Var};

/// Lower bound applied to every calibrated standard deviation.
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cosine term in the patch loss (alpha).
    pub cos_weight: f32,
    /// Weight of the smooth-L1 term in the patch loss (beta).
    pub smooth_l1_weight: f32,
    /// Transition point of the smooth-L1 penalty.
    pub smooth_l1_beta: f32,
    pub cos_eps: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cos_weight: 0.9, smooth_l1_weight: 0.1, smooth_l1_beta: 1.0, cos_eps: 1e-8 }
    }
}

/// Bias-free linear, layer norm, GELU, bias-free linear.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterHead<T = Tensor> {
    /// `[d_in, hidden]`
    pub w_in: T,
    pub norm_gain: T,
    pub norm_bias: T,
    /// `[hidden, d_out]`
    pub w_out: T,
}

impl<T> AdapterHead<T> {
    pub fn named(&self) -> [(&'static str, &T); 4] {
        [
            ("w_in", &self.w_in),
            ("norm.gain", &self.norm_gain),
            ("norm.bias", &self.norm_bias),
            ("w_out", &self.w_out),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut T); 4] {
        [
            ("w_in", &mut self.w_in),
            ("norm.gain", &mut self.norm_gain),
            ("norm.bias", &mut self.norm_bias),
            ("w_out", &mut self.w_out),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AdapterHead<U> {
        AdapterHead {
            w_in: f(&self.w_in),
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
            w_out: f(&self.w_out),
        }
    }
}

/// Default adapter width for a student/teacher pair.
pub fn default_hidden(d_student: usize, d_teacher: usize) -> usize {
    4 * d_student.max(d_teacher)
}

impl AdapterHead {
    /// Truncated-normal projections, unit gain, zero bias.
    pub fn init(d_in: usize, hidden: usize, d_out: usize, seed: u64, stream: u64) -> Self {
        let mut rng = rng::stream(seed, stream);
        AdapterHead {
            w_in: Tensor::from_fn([d_in, hidden], |_| trunc_normal(&mut rng, 0.02)),
            norm_gain: Tensor::ones([hidden]),
            norm_bias: Tensor::zeros([hidden]),
            w_out: Tensor::from_fn([hidden, d_out], |_| trunc_normal(&mut rng, 0.02)),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        AdapterHead {
            w_in: Tensor::zeros([d_in, hidden]),
            norm_gain: Tensor::ones([hidden]),
            norm_bias: Tensor::zeros([hidden]),
            w_out: Tensor::zeros([hidden, d_out]),
        }
    }

    /// A `d -> d` head that maps any input row `x` to `x * sqrt(d) / |x|`
    /// (up to the norm epsilon), so it is the identity on rows that already
    /// have mean-square one, such as unit-gain layer-norm outputs.
    ///
    /// The first projection writes `[x, -x, 0]`, whose hidden mean is zero;
    /// the output sums `GELU(u) - GELU(-u) = u` back together.
    pub fn identity_equivalent(d: usize, hidden: usize) -> Result<Self> {
        if hidden < 2 * d {
            bail!(Parameter, "identity-equivalent head needs hidden >= {}, got {hidden}", 2 * d);
        }
        let mut w_in = Tensor::zeros([d, hidden]);
        let mut w_out = Tensor::zeros([hidden, d]);
        for i in 0..d {
            w_in.data_mut()[i * hidden + i] = 1.0;
            w_in.data_mut()[i * hidden + d + i] = -1.0;
            w_out.data_mut()[i * d + i] = 1.0;
            w_out.data_mut()[(d + i) * d + i] = -1.0;
        }
        let g = (2.0 * d as f64 / hidden as f64).sqrt() as f32;
        let norm_gain = Tensor::from_fn([hidden], |j| if j < 2 * d { g } else { 1.0 });
        Ok(AdapterHead { w_in, norm_gain, norm_bias: Tensor::zeros([hidden]), w_out })
    }

    pub fn in_dim(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w_out.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterHead<Var> {
        self.map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Applies a bound head to `[rows, d_in]` tokens.
pub fn head_forward(tape: &mut Tape, head: &AdapterHead<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul(x, head.w_in)?;
    let h = tape.layer_norm(h, head.norm_gain, head.norm_bias, LAYER_NORM_EPS)?;
    let h = tape.gelu(h);
    tape.matmul(h, head.w_out)
}

/// Maps student tokens (`[d_S]` or `[N, d_S]`) into teacher space.
pub fn adapt_tokens(head: &AdapterHead, tokens: &Tensor) -> Result<Tensor> {
    if tokens.rank() == 0 || tokens.last_dim() != head.in_dim() {
        bail!(Dimension, "adapter expects last dim {}, got shape {:?}", head.in_dim(), tokens.shape());
    }
    let mut tape = Tape::new();
    let h = head.bind(&mut tape, false);
    let rows = tokens.numel() / head.in_dim();
    let x = tape.constant(tokens.clone().reshape([rows, head.in_dim()])?);
    let y = head_forward(&mut tape, &h, x)?;
    let mut shape = tokens.shape().to_vec();
    *shape.last_mut().unwrap() = head.out_dim();
    tape.take(y).reshape(shape)
}

/// Fixed per-coordinate statistics of one teacher's output streams.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStats {
    pub class_mean: Tensor,
    pub class_std: Tensor,
    pub patch_mean: Tensor,
    pub patch_std: Tensor,
    /// Number of images the statistics were computed from.
    pub sample_count: usize,
}

fn column_stats(rows: &[f32], d: usize) -> (Tensor, Tensor) {
    let n = rows.len() / d;
    let mut mean = vec![0.0f64; d];
    for r in rows.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for r in rows.chunks(d) {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|&s| ((s / n as f64).sqrt() as f32).max(STD_FLOOR)).collect();
    (Tensor::from_vec(mean.iter().map(|&m| m as f32).collect()), Tensor::from_vec(std))
}

impl TeacherStats {
    /// Zero mean, unit standard deviation.
    pub fn identity(d: usize) -> Self {
        TeacherStats {
            class_mean: Tensor::zeros([d]),
            class_std: Tensor::ones([d]),
            patch_mean: Tensor::zeros([d]),
            patch_std: Tensor::ones([d]),
            sample_count: 0,
        }
    }

    /// Statistics from `[M, d]` class tokens and `[K, d]` pooled patch tokens.
    pub fn from_streams(class: &Tensor, patch: &Tensor, sample_count: usize) -> Result<Self> {
        if class.rank() != 2 || patch.rank() != 2 || class.last_dim() != patch.last_dim() {
            bail!(Dimension, "stat streams must be [M, d] and [K, d], got {:?} and {:?}", class.shape(), patch.shape());
        }
        if class.rows() == 0 || patch.rows() == 0 {
            bail!(Parameter, "cannot calibrate statistics from an empty batch");
        }
        let d = class.last_dim();
        let (class_mean, class_std) = column_stats(class.data(), d);
        let (patch_mean, patch_std) = column_stats(patch.data(), d);
        Ok(TeacherStats { class_mean, class_std, patch_mean, patch_std, sample_count })
    }

    /// Class stream over all outputs; patch stream pooled over every
    /// position of every output.
    pub fn from_outputs(outputs: &[EncoderOutput]) -> Result<Self> {
        let Some(first) = outputs.first() else {
            bail!(Parameter, "cannot calibrate statistics from an empty batch");
        };
        let d = first.class_token.numel();
        let mut class = Vec::with_capacity(outputs.len() * d);
        let mut patch = Vec::new();
        for o in outputs {
            if o.class_token.numel() != d || o.patch_tokens.last_dim() != d {
                bail!(Dimension, "inconsistent output widths during calibration");
            }
            class.extend_from_slice(o.class_token.data());
            patch.extend_from_slice(o.patch_tokens.data());
        }
        let rows = patch.len() / d;
        Self::from_streams(&Tensor::new(vec![outputs.len(), d], class)?, &Tensor::new(vec![rows, d], patch)?, outputs.len())
    }

    pub fn dim(&self) -> usize {
        self.class_mean.numel()
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("class_mean", &self.class_mean),
            ("class_std", &self.class_std),
            ("patch_mean", &self.patch_mean),
            ("patch_std", &self.patch_std),
        ]
    }

    pub fn normalize_class(&self, tokens: &Tensor) -> Result<Tensor> {
        normalize_features(tokens, &self.class_mean, &self.class_std)
    }

    pub fn normalize_patch(&self, tokens: &Tensor) -> Result<Tensor> {
        normalize_features(tokens, &self.patch_mean, &self.patch_std)
    }
}

/// Runs `teacher` over `images` at their given resolution and computes its
/// output statistics.
pub fn calibrate_stats(teacher: &EncoderParams, images: &[Tensor]) -> Result<TeacherStats> {
    if images.is_empty() {
        bail!(Parameter, "cannot calibrate statistics from an empty batch");
    }
    TeacherStats::from_outputs(&encode(teacher, images)?)
}

fn check_stat_dims(tokens: &Tensor, mean: &Tensor, std: &Tensor) -> Result<usize> {
    let d = mean.numel();
    if tokens.rank() == 0 || tokens.last_dim() != d || std.numel() != d {
        bail!(Dimension, "tokens {:?} do not match statistics of width {d}", tokens.shape());
    }
    Ok(d)
}

/// `(tokens - mean) / std` along the last dimension.
pub fn normalize_features(tokens: &Tensor, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
    let d = check_stat_dims(tokens, mean, std)?;
    let (m, s) = (mean.data(), std.data());
    let data = tokens.data().iter().enumerate().map(|(i, &v)| (v - m[i % d]) / s[i % d]).collect();
    Tensor::new(tokens.shape().to_vec(), data)
}

/// Inverse of [`normalize_features`].
pub fn denormalize_features(tokens: &Tensor, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
    let d = check_stat_dims(tokens, mean, std)?;
    let (m, s) = (mean.data(), std.data());
    let data = tokens.data().iter().enumerate().map(|(i, &v)| v * s[i % d] + m[i % d]).collect();
    Tensor::new(tokens.shape().to_vec(), data)
}

/// A frozen teacher together with the student-side heads that target it.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBinding {
    pub name: String,
    pub teacher: EncoderParams,
    pub class_head: AdapterHead,
    pub patch_head: AdapterHead,
    pub stats: Option<TeacherStats>,
    /// Weight of this teacher's patch loss.
    pub gamma: f32,
    pub native_resolution: usize,
}

impl TeacherBinding {
    /// Heads initialized for a student of width `student_dim`.
    pub fn new(name: &str, teacher: EncoderParams, student_dim: usize, hidden: usize, seed: u64, index: u64) -> Self {
        let d_t = teacher.config.dim;
        let native_resolution = teacher.config.image_size;
        TeacherBinding {
            name: name.to_string(),
            class_head: AdapterHead::init(student_dim, hidden, d_t, seed, 100 + 2 * index),
            patch_head: AdapterHead::init(student_dim, hidden, d_t, seed, 101 + 2 * index),
            teacher,
            stats: None,
            gamma: 1.0,
            native_resolution,
        }
    }

    pub fn teacher_dim(&self) -> usize {
        self.teacher.config.dim
    }

    pub fn stats(&self) -> Result<&TeacherStats> {
        match &self.stats {
            Some(s) => Ok(s),
            None => bail!(State, "teacher {} has no calibrated statistics", self.name),
        }
    }
}

fn square_side(n: usize, grid: (usize, usize)) -> Result<usize> {
    if grid.0 != grid.1 || grid.0 * grid.1 != n || n == 0 {
        bail!(Dimension, "token grid {}x{} is not a square grid of {n} tokens", grid.0, grid.1);
    }
    Ok(grid.0)
}

/// Resizes the smaller of two square token grids (`[N, d]` each) to the
/// larger one. The larger input is returned unchanged.
pub fn align_spatial(
    z: &Tensor,
    z_grid: (usize, usize),
    y: &Tensor,
    y_grid: (usize, usize),
) -> Result<(Tensor, Tensor, (usize, usize))> {
    if z.rank() != 2 || y.rank() != 2 || z.last_dim() != y.last_dim() {
        bail!(Dimension, "cannot align token grids of shapes {:?} and {:?}", z.shape(), y.shape());
    }
    let zs = square_side(z.rows(), z_grid)?;
    let ys = square_side(y.rows(), y_grid)?;
    let d = z.last_dim();
    let resize = |t: &Tensor, from: usize, to: usize| -> Result<Tensor> {
        let grid = t.clone().reshape([from, from, d])?;
        bicubic_resize(&grid, to, to)?.reshape([to * to, d])
    };
    if zs == ys {
        Ok((z.clone(), y.clone(), z_grid))
    } else if zs < ys {
        Ok((resize(z, zs, ys)?, y.clone(), y_grid))
    } else {
        Ok((z.clone(), resize(y, ys, zs)?, z_grid))
    }
}

/// Cosine loss between adapted student class tokens and normalized targets.
pub fn class_token_loss(tape: &mut Tape, z: Var, y: Var, weights: &LossWeights) -> Result<Var> {
    tape.cosine_loss(z, y, weights.cos_eps)
}

/// `alpha * cosine + beta * smooth_l1` on aligned patch tokens.
pub fn patch_token_loss(tape: &mut Tape, z: Var, y: Var, weights: &LossWeights) -> Result<Var> {
    if tape.shape(z) != tape.shape(y) {
        bail!(Contract, "patch loss needs aligned tokens, got {:?} and {:?}", tape.shape(z), tape.shape(y));
    }
    let c = tape.cosine_loss(z, y, weights.cos_eps)?;
    let s = tape.smooth_l1_loss(z, y, weights.smooth_l1_beta)?;
    let c = tape.scale(c, weights.cos_weight);
    let s = tape.scale(s, weights.smooth_l1_weight);
    tape.add(c, s)
}

/// Raw outputs of one teacher for a batch: `[B, d_T]` class tokens and
/// `[B * N_T, d_T]` patch tokens.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub class: Tensor,
    pub patch: Tensor,
    pub grid: (usize, usize),
}

impl TeacherTargets {
    pub fn from_outputs(outputs: &[EncoderOutput]) -> Result<Self> {
        let Some(first) = outputs.first() else {
            bail!(Parameter, "no teacher outputs");
        };
        let d = first.class_token.numel();
        let mut class = Vec::new();
        let mut patch = Vec::new();
        for o in outputs {
            if o.grid != first.grid || o.class_token.numel() != d {
                bail!(Dimension, "teacher outputs in one batch must share grid and width");
            }
            class.extend_from_slice(o.class_token.data());
            patch.extend_from_slice(o.patch_tokens.data());
        }
        let rows = patch.len() / d;
        Ok(TeacherTargets {
            class: Tensor::new(vec![outputs.len(), d], class)?,
            patch: Tensor::new(vec![rows, d], patch)?,
            grid: first.grid,
        })
    }
}

/// Unweighted per-teacher loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TeacherTerms {
    pub class: Var,
    pub patch: Var,
}

/// One teacher's distillation terms for a batch of student tokens.
///
/// Normalizes the teacher tokens, adapts the student tokens through the
/// bound heads, aligns the two token grids and evaluates both losses. The
/// teacher side is constant; only a student-side resize is differentiable.
pub fn teacher_terms(
    tape: &mut Tape,
    binding: &TeacherBinding,
    heads: (&AdapterHead<Var>, &AdapterHead<Var>),
    student: &TokenBatch,
    targets: &TeacherTargets,
    weights: &LossWeights,
) -> Result<TeacherTerms> {
    let stats = binding.stats()?;
    let b = student.batch;
    if targets.class.rows() != b {
        bail!(Dimension, "teacher targets cover {} images, student batch has {b}", targets.class.rows());
    }
    let d_t = binding.teacher_dim();
    let s_side = square_side(student.grid.0 * student.grid.1, student.grid)?;
    let t_side = square_side(targets.grid.0 * targets.grid.1, targets.grid)?;

    let y_c = tape.constant(stats.normalize_class(&targets.class)?);
    let z_c = head_forward(tape, heads.0, student.class)?;
    let class = class_token_loss(tape, z_c, y_c, weights)?;

    let mut z_p = head_forward(tape, heads.1, student.patch)?;
    let mut y_p = stats.normalize_patch(&targets.patch)?;
    if s_side < t_side {
        let g = tape.reshape(z_p, &[b, s_side, s_side, d_t])?;
        let g = tape.bicubic_resize(g, t_side, t_side)?;
        z_p = tape.reshape(g, &[b * t_side * t_side, d_t])?;
    } else if t_side < s_side {
        let g = y_p.reshape([b, t_side, t_side, d_t])?;
        y_p = bicubic_resize(&g, s_side, s_side)?.reshape([b * s_side * s_side, d_t])?;
    }
    let y_p = tape.constant(y_p);
    let patch = patch_token_loss(tape, z_p, y_p, weights)?;
    Ok(TeacherTerms { class, patch })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLoss {
    pub class_loss: f32,
    /// Patch loss before the gamma weight.
    pub patch_loss: f32,
    pub gamma: f32,
}

impl TeacherLoss {
    pub fn weighted(&self) -> f32 {
        self.class_loss + self.gamma * self.patch_loss
    }
}

/// Per-teacher losses and their total, `sum(class + gamma * patch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub teachers: Vec<TeacherLoss>,
    pub total: f32,
}

impl LossReport {
    pub fn from_terms(teachers: Vec<TeacherLoss>) -> Result<Self> {
        if teachers.is_empty() {
            bail!(Parameter, "loss report needs at least one teacher");
        }
        let total = teachers.iter().map(|t| t.weighted() as f64).sum::<f64>() as f32;
        Ok(LossReport { teachers, total })
    }
}

/// Sums the terms into the scalar the optimizer minimizes.
pub fn combine_terms(tape: &mut Tape, bindings: &[TeacherBinding], terms: &[TeacherTerms]) -> Result<(Var, LossReport)> {
    if bindings.is_empty() || bindings.len() != terms.len() {
        bail!(Parameter, "need one loss term per teacher, got {} for {} teachers", terms.len(), bindings.len());
    }
    let mut total: Option<Var> = None;
    let mut report = Vec::with_capacity(terms.len());
    for (binding, t) in bindings.iter().zip(terms) {
        let p = tape.scale(t.patch, binding.gamma);
        let term = tape.add(t.class, p)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        report.push(TeacherLoss { class_loss: tape.item(t.class), patch_loss: tape.item(t.patch), gamma: binding.gamma });
    }
    let total = total.unwrap();
    let mut report = LossReport::from_terms(report)?;
    report.total = tape.item(total);
    Ok((total, report))
}

fn single_batch(out: &EncoderOutput, tape: &mut Tape) -> TokenBatch {
    let d = out.class_token.numel();
    let class = tape.constant(out.class_token.clone().reshape([1, d]).expect("class token is a vector"));
    let patch = tape.constant(out.patch_tokens.clone());
    TokenBatch { class, patch, batch: 1, grid: out.grid }
}

/// Class loss and gamma-weighted patch loss of one teacher for one image.
pub fn teacher_loss(
    binding: &TeacherBinding,
    student_out: &EncoderOutput,
    teacher_out: &EncoderOutput,
    weights: &LossWeights,
) -> Result<(f32, f32)> {
    let mut tape = Tape::new();
    let student = single_batch(student_out, &mut tape);
    let heads = (binding.class_head.bind(&mut tape, false), binding.patch_head.bind(&mut tape, false));
    let targets = TeacherTargets::from_outputs(std::slice::from_ref(teacher_out))?;
    let terms = teacher_terms(&mut tape, binding, (&heads.0, &heads.1), &student, &targets, weights)?;
    Ok((tape.item(terms.class), binding.gamma * tape.item(terms.patch)))
}

/// Multi-teacher loss of one student output against one output per teacher.
pub fn total_distill_loss(
    bindings: &[TeacherBinding],
    student_out: &EncoderOutput,
    teacher_outs: &[EncoderOutput],
    weights: &LossWeights,
) -> Result<LossReport> {
    if bindings.is_empty() {
        bail!(Parameter, "total loss needs at least one teacher");
    }
    if bindings.len() != teacher_outs.len() {
        bail!(Parameter, "{} teachers but {} teacher outputs", bindings.len(), teacher_outs.len());
    }
    let mut tape = Tape::new();
    let student = single_batch(student_out, &mut tape);
    let mut terms = Vec::with_capacity(bindings.len());
    for (binding, out) in bindings.iter().zip(teacher_outs) {
        let heads = (binding.class_head.bind(&mut tape, false), binding.patch_head.bind(&mut tape, false));
        let targets = TeacherTargets::from_outputs(std::slice::from_ref(out))?;
        terms.push(teacher_terms(&mut tape, binding, (&heads.0, &heads.1), &student, &targets, weights)?);
    }
    Ok(combine_terms(&mut tape, bindings, &terms)?.1)
}

pub const STATS_VERSION: u32 = 1;
const STATS_MAGIC: &[u8; 8] = b"DSTLSTAT";

/// Statistics artifact: magic `DSTLSTAT`, u32 version, u32 width `d`,
/// u32 sample count, then `d` f32 values each of class mean, class std,
/// patch mean and patch std (little-endian).
pub fn encode_stats(stats: &TeacherStats) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 16 * stats.dim());
    out.extend_from_slice(STATS_MAGIC);
    out.extend_from_slice(&STATS_VERSION.to_le_bytes());
    out.extend_from_slice(&(stats.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(stats.sample_count as u32).to_le_bytes());
    for (_, t) in stats.named() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_stats(bytes: &[u8]) -> Result<TeacherStats> {
    let mut r = crate::data::ByteReader::new(bytes, "statistics file");
    if r.take(8)? != STATS_MAGIC {
        bail!(Format, "not a statistics file (bad magic)");
    }
    let version = r.u32()?;
    if version != STATS_VERSION {
        return Err(crate::error::Error::Version { found: version, expected: STATS_VERSION });
    }
    let d = r.u32()? as usize;
    let sample_count = r.u32()? as usize;
    if d == 0 || d > bytes.len() / 16 {
        bail!(Truncated, "statistics file declares width {d} but holds {} bytes", bytes.len());
    }
    let mut next = || -> Result<Tensor> { Tensor::new(vec![d], r.f32s(d)?) };
    let stats = TeacherStats {
        class_mean: next()?,
        class_std: next()?,
        patch_mean: next()?,
        patch_std: next()?,
        sample_count,
    };
    if !r.finished() {
        bail!(Format, "trailing bytes after statistics");
    }
    Ok(stats)
}

pub fn save_stats(path: &std::path::Path, stats: &TeacherStats) -> Result<()> {
    std::fs::write(path, encode_stats(stats))?;
    Ok(())
}

pub fn load_stats(path: &std::path::Path) -> Result<TeacherStats> {
    decode_stats(&std::fs::read(path)?)
}
