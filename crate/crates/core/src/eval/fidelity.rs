use crate::data::{normalize_input, resize_image};
use crate::distill::{adapt_tokens, align_spatial, normalize_features, AdapterHead, TeacherBinding, TeacherStats};
use crate::encoder::{vit_forward, EncoderParams};
use crate::error::{bail, Result};
use crate::pipeline::HeadRecord;
use crate::tensor::Tensor;

/// A frozen teacher seen through one student's adapter heads.
#[derive(Clone, Copy, Debug)]
pub struct FidelityTarget<'a> {
    pub teacher: &'a EncoderParams,
    pub class_head: &'a AdapterHead,
    pub patch_head: &'a AdapterHead,
    pub stats: &'a TeacherStats,
}

impl<'a> FidelityTarget<'a> {
    pub fn from_binding(b: &'a TeacherBinding) -> Result<Self> {
        Ok(FidelityTarget { teacher: &b.teacher, class_head: &b.class_head, patch_head: &b.patch_head, stats: b.stats()? })
    }

    pub fn from_record(teacher: &'a EncoderParams, head: &'a HeadRecord) -> Result<Self> {
        let Some(stats) = head.stats.as_ref() else {
            bail!(State, "head {:?} carries no teacher statistics", head.name);
        };
        Ok(FidelityTarget { teacher, class_head: &head.class_head, patch_head: &head.patch_head, stats })
    }
}

/// Mean cosine similarity between adapted student tokens and normalized
/// teacher tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fidelity {
    /// Averaged over images.
    pub class_cosine: f64,
    /// Averaged over every aligned patch position of every image.
    pub patch_cosine: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt()).max(1e-12)
}

/// Fidelity on raw `[H, W, 3]` images, each resized to `student_res` for
/// the student and to `teacher_res` for the teacher. Grids are aligned as
/// in training.
pub fn token_fidelity(
    student: &EncoderParams,
    target: FidelityTarget,
    images: &[Tensor],
    student_res: usize,
    teacher_res: usize,
) -> Result<Fidelity> {
    if images.is_empty() {
        bail!(Parameter, "fidelity needs at least one image");
    }
    let d_t = target.teacher.config.dim;
    let (mut class_sum, mut patch_sum, mut patch_count) = (0.0f64, 0.0f64, 0usize);
    for image in images {
        let s = vit_forward(student, &normalize_input(&resize_image(image, student_res)?)?)?;
        let t = vit_forward(target.teacher, &normalize_input(&resize_image(image, teacher_res)?)?)?;
        let z_class = adapt_tokens(target.class_head, &s.class_token.clone().reshape([1, student.config.dim])?)?;
        let y_class = normalize_features(&t.class_token.clone().reshape([1, d_t])?, &target.stats.class_mean, &target.stats.class_std)?;
        class_sum += cosine(z_class.data(), y_class.data());
        let z_patch = adapt_tokens(target.patch_head, &s.patch_tokens)?;
        let y_patch = normalize_features(&t.patch_tokens, &target.stats.patch_mean, &target.stats.patch_std)?;
        let (z, y, _) = align_spatial(&z_patch, s.grid, &y_patch, t.grid)?;
        for (zr, yr) in z.data().chunks(d_t).zip(y.data().chunks(d_t)) {
            patch_sum += cosine(zr, yr);
            patch_count += 1;
        }
    }
    Ok(Fidelity { class_cosine: class_sum / images.len() as f64, patch_cosine: patch_sum / patch_count as f64 })
}
