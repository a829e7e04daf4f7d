//! Separable bicubic resampling with the Catmull-Rom kernel.
//!
//! Sample positions follow the half-pixel convention: output index `o`
//! looks at input coordinate `(o + 0.5) * in / out - 0.5`. Taps that fall
//! outside the grid are clamped to the nearest edge sample.

use super::Tensor;
use crate::error::{bail, Result};

/// Kernel parameter of the Catmull-Rom cubic.
pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn catmull_rom(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four clamped taps and weights per output position along one axis.
#[derive(Clone, Debug)]
pub struct ResampleTaps {
    pub index: Vec<[usize; 4]>,
    pub weight: Vec<[f32; 4]>,
}

impl ResampleTaps {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Taps for resampling the window `[offset, offset + span)` of an axis with
/// `in_len` samples onto `out_len` output samples.
pub fn resample_taps(in_len: usize, out_len: usize, offset: f64, span: f64) -> ResampleTaps {
    let scale = span / out_len as f64;
    let last = in_len as isize - 1;
    let mut index = Vec::with_capacity(out_len);
    let mut weight = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = offset + (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        let base = base as isize;
        let mut idx = [0usize; 4];
        for (m, slot) in idx.iter_mut().enumerate() {
            *slot = (base - 1 + m as isize).clamp(0, last) as usize;
        }
        let w = [
            catmull_rom(t + 1.0) as f32,
            catmull_rom(t) as f32,
            catmull_rom(1.0 - t) as f32,
            catmull_rom(2.0 - t) as f32,
        ];
        index.push(idx);
        weight.push(w);
    }
    ResampleTaps { index, weight }
}

/// Geometry of a (possibly batched) channels-last grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GridDims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl GridDims {
    pub(crate) fn of(shape: &[usize]) -> Result<Self> {
        let dims = match *shape {
            [h, w, d] => GridDims { batch: 1, h, w, d },
            [b, h, w, d] => GridDims { batch: b, h, w, d },
            _ => bail!(Dimension, "bicubic resize expects [h,w,d] or [b,h,w,d], got {:?}", shape),
        };
        if dims.h < 2 || dims.w < 2 {
            bail!(Dimension, "bicubic resize needs a grid of at least 2x2, got {}x{}", dims.h, dims.w);
        }
        Ok(dims)
    }
}

pub(crate) fn resize_forward(
    input: &[f32],
    g: GridDims,
    ys: &ResampleTaps,
    xs: &ResampleTaps,
) -> Vec<f32> {
    let (oh, ow, d) = (ys.len(), xs.len(), g.d);
    // Horizontal pass: [b, h, w, d] -> [b, h, ow, d].
    let mut tmp = vec![0.0f32; g.batch * g.h * ow * d];
    for b in 0..g.batch {
        for y in 0..g.h {
            let src_row = (b * g.h + y) * g.w;
            let dst_row = (b * g.h + y) * ow;
            for (ox, (idx, w)) in xs.index.iter().zip(&xs.weight).enumerate() {
                let out = &mut tmp[(dst_row + ox) * d..(dst_row + ox + 1) * d];
                for m in 0..4 {
                    let src = &input[(src_row + idx[m]) * d..(src_row + idx[m] + 1) * d];
                    let wm = w[m];
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o += wm * s;
                    }
                }
            }
        }
    }
    // Vertical pass: [b, h, ow, d] -> [b, oh, ow, d].
    let mut out = vec![0.0f32; g.batch * oh * ow * d];
    let row_len = ow * d;
    for b in 0..g.batch {
        for (oy, (idx, w)) in ys.index.iter().zip(&ys.weight).enumerate() {
            let dst = &mut out[(b * oh + oy) * row_len..(b * oh + oy + 1) * row_len];
            for m in 0..4 {
                let src = &tmp[(b * g.h + idx[m]) * row_len..(b * g.h + idx[m] + 1) * row_len];
                let wm = w[m];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += wm * s;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_forward`]: accumulates into `grad_in`.
pub(crate) fn resize_backward(
    grad_out: &[f32],
    g: GridDims,
    ys: &ResampleTaps,
    xs: &ResampleTaps,
    grad_in: &mut [f32],
) {
    let (oh, ow, d) = (ys.len(), xs.len(), g.d);
    let row_len = ow * d;
    let mut tmp = vec![0.0f32; g.batch * g.h * row_len];
    for b in 0..g.batch {
        for (oy, (idx, w)) in ys.index.iter().zip(&ys.weight).enumerate() {
            let src = &grad_out[(b * oh + oy) * row_len..(b * oh + oy + 1) * row_len];
            for m in 0..4 {
                let dst = &mut tmp[(b * g.h + idx[m]) * row_len..(b * g.h + idx[m] + 1) * row_len];
                let wm = w[m];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += wm * s;
                }
            }
        }
    }
    for b in 0..g.batch {
        for y in 0..g.h {
            let src_row = (b * g.h + y) * ow;
            let dst_row = (b * g.h + y) * g.w;
            for (ox, (idx, w)) in xs.index.iter().zip(&xs.weight).enumerate() {
                let src = &tmp[(src_row + ox) * d..(src_row + ox + 1) * d];
                for m in 0..4 {
                    let dst = &mut grad_in[(dst_row + idx[m]) * d..(dst_row + idx[m] + 1) * d];
                    let wm = w[m];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += wm * s;
                    }
                }
            }
        }
    }
}

/// Bicubic resize of a `[h,w,d]` or `[b,h,w,d]` grid to `out_h x out_w`.
pub fn bicubic_resize(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let g = GridDims::of(grid.shape())?;
    if out_h == 0 || out_w == 0 {
        bail!(Dimension, "bicubic resize output must be at least 1x1, got {out_h}x{out_w}");
    }
    if out_h == g.h && out_w == g.w {
        return Ok(grid.clone());
    }
    let ys = resample_taps(g.h, out_h, 0.0, g.h as f64);
    let xs = resample_taps(g.w, out_w, 0.0, g.w as f64);
    let data = resize_forward(grid.data(), g, &ys, &xs);
    let shape = if grid.rank() == 3 {
        vec![out_h, out_w, g.d]
    } else {
        vec![g.batch, out_h, out_w, g.d]
    };
    Tensor::new(shape, data)
}
