use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PCK_THRESHOLD: f64 = 0.1;

/// Patch tokens of one image together with the pixel size of that image.
#[derive(Clone, Copy, Debug)]
pub struct DenseView<'a> {
    /// `[rows * cols, d]`.
    pub tokens: &'a Tensor,
    pub grid: (usize, usize),
    pub height: usize,
    pub width: usize,
}

/// Source and target pixel coordinates `(x, y)` of one annotated keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointPair {
    pub src: (f32, f32),
    pub tgt: (f32, f32),
}

impl DenseView<'_> {
    fn check(&self) -> Result<usize> {
        let (rows, cols) = self.grid;
        if self.tokens.rank() != 2 || self.tokens.shape()[0] != rows * cols || rows == 0 || cols == 0 {
            bail!(Dimension, "dense view: tokens {:?} do not fill a {rows}x{cols} grid", self.tokens.shape());
        }
        if self.height == 0 || self.width == 0 {
            bail!(Parameter, "dense view: empty image size");
        }
        Ok(self.tokens.shape()[1])
    }
}

/// Bilinear upsampling of a token grid to `[height * width, d]` pixel
/// features with corner alignment: the outermost tokens land exactly on the
/// outermost pixels, so no two pixels copy the same token unless the grid is
/// degenerate.
pub fn upsample_bilinear(view: &DenseView) -> Result<Tensor> {
    let d = view.check()?;
    let (rows, cols) = view.grid;
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let s = if out > 1 { o as f64 * (len - 1) as f64 / (out - 1) as f64 } else { 0.0 };
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(view.height, rows);
    let tx = taps(view.width, cols);
    let t = view.tokens.data();
    let mut out = vec![0.0f32; view.height * view.width * d];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let dst = &mut out[(y * view.width + x) * d..(y * view.width + x + 1) * d];
            for (r, c, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                let src = &t[(r * cols + c) * d..(r * cols + c + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wgt * v;
                }
            }
        }
    }
    Tensor::new(vec![view.height * view.width, d], out)
}

fn unit_rows(t: &Tensor) -> Vec<f64> {
    let d = t.last_dim();
    t.data()
        .chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(move |&v| v as f64 / n)
        })
        .collect()
}

fn rounded_pixel(p: (f32, f32), width: usize, height: usize) -> Result<usize> {
    let (x, y) = p;
    if !(x >= -0.5 && y >= -0.5 && x < width as f32 - 0.5 && y < height as f32 - 0.5) {
        bail!(Parameter, "keypoint ({x}, {y}) lies outside a {width}x{height} image");
    }
    let xi = (x.round() as usize).min(width - 1);
    let yi = (y.round() as usize).min(height - 1);
    Ok(yi * width + xi)
}

struct Matcher {
    src: Vec<f64>,
    tgt: Vec<f64>,
    d: usize,
    src_size: (usize, usize),
    tgt_width: usize,
}

impl Matcher {
    fn new(src: &DenseView, tgt: &DenseView) -> Result<Self> {
        let (ds, dt) = (src.check()?, tgt.check()?);
        if ds != dt {
            bail!(Dimension, "correspondence: source has {ds} feature dims, target {dt}");
        }
        Ok(Matcher {
            src: unit_rows(&upsample_bilinear(src)?),
            tgt: unit_rows(&upsample_bilinear(tgt)?),
            d: ds,
            src_size: (src.width, src.height),
            tgt_width: tgt.width,
        })
    }

    /// Target pixel `(x, y)` of maximum cosine similarity; first in raster
    /// order on ties.
    fn best(&self, p: (f32, f32)) -> Result<(usize, usize)> {
        let d = self.d;
        let i = rounded_pixel(p, self.src_size.0, self.src_size.1)?;
        let q = &self.src[i * d..(i + 1) * d];
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, row) in self.tgt.chunks(d).enumerate() {
            let s: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, j);
            }
        }
        Ok((best.1 % self.tgt_width, best.1 / self.tgt_width))
    }
}

/// Predicted target pixel for source keypoint `point`.
pub fn match_keypoint(src: &DenseView, tgt: &DenseView, point: (f32, f32)) -> Result<(usize, usize)> {
    Matcher::new(src, tgt)?.best(point)
}

/// Fraction of pairs whose predicted target lies within
/// `threshold * bbox_max` pixels of the annotated target.
///
/// Both feature maps are upsampled to pixel resolution; the source feature
/// is read at the rounded keypoint and matched by cosine similarity against
/// every target pixel.
pub fn pck_correspondence(
    src: &DenseView,
    tgt: &DenseView,
    pairs: &[KeypointPair],
    bbox_max: f32,
    threshold: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        bail!(Parameter, "pck: no keypoint pairs");
    }
    if !(bbox_max > 0.0) || !(threshold >= 0.0) {
        bail!(Parameter, "pck: bbox size and threshold must be positive");
    }
    let m = Matcher::new(src, tgt)?;
    let radius = threshold * bbox_max as f64;
    let mut hits = 0;
    for pair in pairs {
        rounded_pixel(pair.tgt, tgt.width, tgt.height)?;
        let (px, py) = m.best(pair.src)?;
        let dist = ((px as f64 - pair.tgt.0 as f64).powi(2) + (py as f64 - pair.tgt.1 as f64).powi(2)).sqrt();
        if dist <= radius {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
