use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Linear warmup over `warmup_fraction * total_steps` steps, then cosine
/// decay from `base_lr` to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base_lr;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for a list of parameters plus the shared step
/// count used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) =
            shapes.into_iter().map(|s| (Tensor::zeros(s.to_vec()), Tensor::zeros(s.to_vec()))).unzip();
        AdamState { t: 0, m, v }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One decoupled-weight-decay Adam update. `weight_decay` holds one
/// coefficient per parameter so that callers can exempt some tensors.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&[f32]],
    state: &mut AdamState,
    lr: f64,
    weight_decay: &[f64],
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() || params.len() != weight_decay.len() {
        bail!(
            Dimension,
            "adamw: {} params, {} grads, {} moment buffers, {} decay entries",
            params.len(),
            grads.len(),
            state.len(),
            weight_decay.len()
        );
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            bail!(Dimension, "adamw: parameter {i} has shape {:?} but gradient/moments do not match", p.shape());
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = 1.0 - lr * weight_decay[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gj = gj as f64;
            let m_new = hyper.beta1 * *mj as f64 + (1.0 - hyper.beta1) * gj;
            let v_new = hyper.beta2 * *vj as f64 + (1.0 - hyper.beta2) * gj * gj;
            *mj = m_new as f32;
            *vj = v_new as f32;
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + hyper.eps);
            *w = (*w as f64 * decay - lr * update) as f32;
        }
    }
    Ok(())
}
