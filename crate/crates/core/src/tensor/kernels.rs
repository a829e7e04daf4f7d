// Raw slice kernels shared by the tape and by gradient-free code paths.

/// `c = a·b (+ c when accumulate)` for row-major `a: [m,k]`, `b: [k,n]`,
/// with explicit strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    (rsc, csc): (isize, isize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    debug_assert!(max_index(m, k, rsa, csa) < a.len());
    debug_assert!(max_index(k, n, rsb, csb) < b.len());
    debug_assert!(max_index(m, n, rsc, csc) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strided extents were checked against the slice lengths above
    // (in debug builds) and every caller derives strides from the shapes it
    // validated, so all accessed elements lie inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

/// Plain row-major matrix product `[m,k]·[k,n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out, (n as isize, 1), false);
    out
}

pub(crate) const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
pub(crate) const GELU_K: f32 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise layer norm without affine. Returns (normalized, mean, rstd).
pub(crate) fn layer_norm_rows(x: &[f32], d: usize, eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = ((v as f64 - mean) * rstd) as f32;
        }
        means.push(mean as f32);
        rstds.push(rstd as f32);
    }
    (out, means, rstds)
}

/// In-place numerically stable softmax over contiguous rows of length `n`.
pub(crate) fn softmax_rows(x: &mut [f32], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
