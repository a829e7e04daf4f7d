use std::fs;
use std::path::Path;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Eigenvalues at or below this fraction of the largest one count as zero.
const RANK_TOL: f64 = 1e-10;
/// Channels whose projected range is below this are drawn as mid-gray.
const FLAT_RANGE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// `[rows, cols, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// Share of total variance captured by each of the three channels.
    pub explained: [f64; 3],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn explained_top3(&self) -> f64 {
        self.explained.iter().sum()
    }
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and the matching unit
/// eigenvectors as rows.
pub(crate) fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// Projects `[N, d]` patch tokens onto their top three principal components
/// and rescales each to `[0, 1]` as an RGB image over the token grid.
///
/// Components are signed so that their largest-magnitude entry is positive.
/// When the tokens have rank below three, the missing components are zero
/// vectors; flat channels (including those) render as 0.5.
pub fn pca_rgb(tokens: &Tensor, grid: (usize, usize)) -> Result<PcaProjection> {
    let (rows, cols) = grid;
    if tokens.rank() != 2 || tokens.shape()[0] != rows * cols {
        bail!(Dimension, "pca_rgb: tokens {:?} do not fill a {rows}x{cols} grid", tokens.shape());
    }
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    if n < 3 || d < 3 {
        bail!(Parameter, "pca_rgb needs at least 3 tokens of at least 3 dims, got [{n}, {d}]");
    }
    let mut mean = vec![0.0f64; d];
    for r in tokens.data().chunks(d) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = tokens.data().chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(&x, m)| x as f64 - m)).collect();
    let mut cov = vec![0.0f64; d * d];
    for r in centered.chunks(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, d);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let cutoff = RANK_TOL * values[0].max(0.0);

    let mut explained = [0.0f64; 3];
    let mut channels = vec![vec![0.0f64; n]; 3];
    for c in 0..3 {
        if !(values[c] > cutoff) || total <= 0.0 {
            continue;
        }
        explained[c] = values[c] / total;
        let mut u = vectors[c].clone();
        let lead = u.iter().enumerate().fold(0, |b, (i, x)| if x.abs() > u[b].abs() { i } else { b });
        if u[lead] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        for (k, r) in centered.chunks(d).enumerate() {
            channels[c][k] = r.iter().zip(&u).map(|(a, b)| a * b).sum();
        }
    }
    let mut image = vec![0.0f32; n * 3];
    for (c, ch) in channels.iter().enumerate() {
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let flat = hi - lo <= FLAT_RANGE * (1.0 + hi.abs().max(lo.abs()));
        for (k, &x) in ch.iter().enumerate() {
            image[k * 3 + c] = if flat { 0.5 } else { ((x - lo) / (hi - lo)) as f32 };
        }
    }
    Ok(PcaProjection { image: Tensor::new(vec![rows, cols, 3], image)?, explained, eigenvalues: values })
}

/// Binary PPM (P6) bytes for an `[H, W, 3]` image in `[0, 1]`; values are
/// clamped and rounded to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        bail!(Dimension, "ppm expects an [H, W, 3] image, got {:?}", image.shape());
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}
