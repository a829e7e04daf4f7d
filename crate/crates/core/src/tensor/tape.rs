use super::interp::{resample_taps, resize_backward, resize_forward, GridDims, ResampleTaps};
use super::kernels::{self, dot, gemm};
use super::Tensor;
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    AddTiled { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f32>, rstd: Vec<f32> },
    Gelu { x: Var },
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<f32> },
    CosineLoss { pred: Var, target: Var, eps: f32 },
    SmoothL1 { pred: Var, target: Var, beta: f32 },
    MseLoss { pred: Var, target: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Bicubic { x: Var, dims: GridDims, ys: ResampleTaps, xs: ResampleTaps },
    SelectRows { x: Var, indices: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    PrependRows { prefix: Var, x: Var, batch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of differentiable operations.
///
/// Nodes only reference earlier nodes, so the insertion order is a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Removes and returns the value recorded for `v`, leaving an empty
    /// placeholder. Useful to extract outputs once a tape is finished.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0]))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor::new(shape, data)
            .expect("operation produced data inconsistent with its shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    /// Matrix product. `a` may carry leading batch dimensions, which are
    /// flattened into rows: `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            bail!(Dimension, "matmul: cannot multiply {:?} by {:?}", sa, sb);
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, data, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c }, &[x])
    }

    /// Adds `b` to every consecutive `b.numel()`-sized block of `a`, e.g. a
    /// bias `[d]` onto `[rows, d]` or positional rows `[n, d]` onto
    /// `[batch * n, d]`. Both must share the last dimension.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.numel() == 0 || ta.numel() % tb.numel() != 0 || ta.last_dim() != tb.last_dim() {
            bail!(Dimension, "add_tiled: cannot tile {:?} over {:?}", tb.shape(), ta.shape());
        }
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddTiled { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Vec::new(), vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = (self.data(x).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        self.push(Vec::new(), vec![s], Op::Mean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            bail!(Dimension, "reshape: cannot view {:?} as {:?}", self.shape(x), shape);
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// Layer normalization over the last dimension with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if !(eps > 0.0) {
            bail!(Parameter, "layer_norm: eps must be positive, got {eps}");
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            bail!(
                Dimension,
                "layer_norm: input {:?} needs gain/bias of [{d}], got {:?} and {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            );
        }
        let (normed, _, rstd) = kernels::layer_norm_rows(self.data(x), d, eps);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut data = normed.clone();
        for row in data.chunks_mut(d) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::LayerNorm { x, gain, bias, normed, rstd }, &[x, gain, bias]))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu { x }, &[x])
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Parameter, "softmax: axis {axis} out of range for shape {:?}", shape);
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = vec![0.0f32; src.len()];
        let mut buf = vec![0.0f32; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for (a, slot) in buf.iter_mut().enumerate() {
                    *slot = src[(o * axis_len + a) * inner + i];
                }
                kernels::softmax_rows(&mut buf, axis_len);
                for (a, v) in buf.iter().enumerate() {
                    data[(o * axis_len + a) * inner + i] = *v;
                }
            }
        }
        Ok(self.push(shape, data, Op::Softmax { x, outer, axis_len, inner }, &[x]))
    }

    /// Multi-head scaled dot-product self-attention over packed projections.
    ///
    /// `qkv` is `[batch * tokens, 3 * dim]` laid out as `[q | k | v]`; the
    /// result is `[batch * tokens, dim]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv);
        if shape.len() != 2 || shape[0] != batch * tokens || shape[1] % 3 != 0 {
            bail!(Dimension, "attention: qkv {:?} incompatible with batch {batch} x tokens {tokens}", shape);
        }
        let dim = shape[1] / 3;
        if heads == 0 || dim % heads != 0 {
            bail!(Parameter, "attention: dim {dim} not divisible by {heads} heads");
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let src = self.data(qkv);
        let row = (3 * dim) as isize;
        let mut probs = vec![0.0f32; batch * heads * tokens * tokens];
        let mut out = vec![0.0f32; batch * tokens * dim];
        for b in 0..batch {
            let base = b * tokens * 3 * dim;
            for h in 0..heads {
                let q = &src[base + h * dh..];
                let k = &src[base + dim + h * dh..];
                let v = &src[base + 2 * dim + h * dh..];
                let p = &mut probs[(b * heads + h) * tokens * tokens..][..tokens * tokens];
                // scores = q · k^T
                gemm(tokens, dh, tokens, q, (row, 1), k, (1, row), p, (tokens as isize, 1), false);
                for s in p.iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_rows(p, tokens);
                let o = &mut out[b * tokens * dim + h * dh..];
                gemm(tokens, tokens, dh, p, (tokens as isize, 1), v, (row, 1), o, (dim as isize, 1), false);
            }
        }
        Ok(self.push(
            vec![batch * tokens, dim],
            out,
            Op::Attention { qkv, batch, tokens, heads, probs },
            &[qkv],
        ))
    }

    /// Mean over rows of `1 - cos(pred_row, target_row)`, rows taken along
    /// the last dimension. `target` is treated as a constant.
    pub fn cosine_loss(&mut self, pred: Var, target: Var, eps: f32) -> Result<Var> {
        self.same_shape("cosine_loss", pred, target)?;
        if !(eps > 0.0) {
            bail!(Parameter, "cosine_loss: eps must be positive, got {eps}");
        }
        let p = self.value(pred);
        let t = self.data(target);
        let d = p.last_dim();
        let rows = p.rows();
        let mut total = 0.0f64;
        for r in 0..rows {
            total += 1.0 - row_cosine(&p.data()[r * d..(r + 1) * d], &t[r * d..(r + 1) * d], eps).0;
        }
        let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
        Ok(self.push(Vec::new(), vec![loss as f32], Op::CosineLoss { pred, target, eps }, &[pred]))
    }

    /// Mean over elements of the Huber-style smooth L1 penalty with
    /// transition point `beta`. `target` is treated as a constant.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Var, beta: f32) -> Result<Var> {
        self.same_shape("smooth_l1_loss", pred, target)?;
        if !(beta > 0.0) {
            bail!(Parameter, "smooth_l1_loss: beta must be positive, got {beta}");
        }
        let beta64 = beta as f64;
        let n = self.value(pred).numel();
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| {
                let e = (p as f64 - t as f64).abs();
                if e < beta64 {
                    0.5 * e * e / beta64
                } else {
                    e - 0.5 * beta64
                }
            })
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(Vec::new(), vec![loss as f32], Op::SmoothL1 { pred, target, beta }, &[pred]))
    }

    /// Mean squared error; `target` is treated as a constant.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.value(pred).numel().max(1);
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
            .sum();
        Ok(self.push(Vec::new(), vec![(total / n as f64) as f32], Op::MseLoss { pred, target }, &[pred]))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            bail!(Dimension, "cross_entropy: logits {:?} with {} labels", shape, labels.len());
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            bail!(Parameter, "cross_entropy: label {bad} out of range for {classes} classes");
        }
        let mut probs = self.data(logits).to_vec();
        kernels::softmax_rows(&mut probs, classes);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs[r * classes + l].max(f32::MIN_POSITIVE) as f64).ln())
            .sum();
        let loss = total / labels.len().max(1) as f64;
        Ok(self.push(
            Vec::new(),
            vec![loss as f32],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Differentiable bicubic resize of a `[h,w,d]` or `[b,h,w,d]` grid.
    pub fn bicubic_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = GridDims::of(self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            bail!(Dimension, "bicubic resize output must be at least 1x1, got {out_h}x{out_w}");
        }
        let ys = resample_taps(dims.h, out_h, 0.0, dims.h as f64);
        let xs = resample_taps(dims.w, out_w, 0.0, dims.w as f64);
        let data = resize_forward(self.data(x), dims, &ys, &xs);
        let shape = if self.shape(x).len() == 3 {
            vec![out_h, out_w, dims.d]
        } else {
            vec![dims.batch, out_h, out_w, dims.d]
        };
        Ok(self.push(shape, data, Op::Bicubic { x, dims, ys, xs }, &[x]))
    }

    /// Gathers rows of `x` viewed as `[rows, last_dim]`.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let rows = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            bail!(Dimension, "select_rows: row {bad} out of range for {rows} rows");
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(vec![indices.len(), d], data, Op::SelectRows { x, indices: indices.to_vec() }, &[x]))
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.value(a).last_dim(), self.value(b).last_dim());
        if da != db {
            bail!(Dimension, "concat_rows: row widths {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let rows = self.value(a).rows() + self.value(b).rows();
        Ok(self.push(vec![rows, da], data, Op::ConcatRows { a, b }, &[a, b]))
    }

    /// Inserts the same `prefix` rows in front of each of the `batch`
    /// equal-sized row groups of `x`.
    pub fn prepend_rows(&mut self, prefix: Var, x: Var, batch: usize) -> Result<Var> {
        let (dp, dx) = (self.value(prefix).last_dim(), self.value(x).last_dim());
        let rows = self.value(x).rows();
        if dp != dx || batch == 0 || rows % batch != 0 {
            bail!(
                Dimension,
                "prepend_rows: prefix {:?} onto {:?} in {batch} groups",
                self.shape(prefix),
                self.shape(x)
            );
        }
        let per = rows / batch;
        let p = self.data(prefix);
        let src = self.data(x);
        let mut data = Vec::with_capacity(batch * (p.len() + per * dx));
        for b in 0..batch {
            data.extend_from_slice(p);
            data.extend_from_slice(&src[b * per * dx..(b + 1) * per * dx]);
        }
        let total = batch * (self.value(prefix).rows() + per);
        Ok(self.push(vec![total, dx], data, Op::PrependRows { prefix, x, batch }, &[prefix, x]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires gradient and is reachable from `loss`
    /// receives an accumulated gradient, stored on its tensor. Gradients
    /// from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            bail!(Contract, "backward: variable {} is not on this tape", loss.0);
        }
        if !self.value(loss).is_scalar() {
            bail!(Contract, "backward: loss must be scalar, got shape {:?}", self.shape(loss));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].value.requires_grad;
        let val = |v: &Var| nodes[v.0].value.data();
        // Each arm holds at most one mutable gradient buffer at a time.
        fn acc<'a>(grads: &'a mut [Option<Vec<f32>>], v: Var, n: usize) -> &'a mut Vec<f32> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let numel = |v: &Var| nodes[v.0].value.numel();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(a) {
                    let ga = acc(grads, *a, numel(a));
                    // dA = dC · B^T
                    gemm(m, n, k, g, (n as isize, 1), val(b), (1, n as isize), ga, (k as isize, 1), true);
                }
                if needs(b) {
                    let gb = acc(grads, *b, numel(b));
                    // dB = A^T · dC
                    gemm(k, m, n, val(a), (1, k as isize), g, (n as isize, 1), gb, (n as isize, 1), true);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(acc(grads, *v, numel(v)), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(a) {
                    add_into(acc(grads, *a, numel(a)), g);
                }
                if needs(b) {
                    for (o, gi) in acc(grads, *b, numel(b)).iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(a) {
                    let vb = val(b);
                    for ((o, gi), bi) in acc(grads, *a, numel(a)).iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if needs(b) {
                    let va = val(a);
                    for ((o, gi), ai) in acc(grads, *b, numel(b)).iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs(x) {
                    for (o, gi) in acc(grads, *x, numel(x)).iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::AddTiled { a, b } => {
                if needs(a) {
                    add_into(acc(grads, *a, numel(a)), g);
                }
                if needs(b) {
                    let nb = numel(b);
                    let gb = acc(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Sum { x } => {
                if needs(x) {
                    let g0 = g[0];
                    for o in acc(grads, *x, numel(x)).iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::Mean { x } => {
                if needs(x) {
                    let n = numel(x).max(1);
                    let g0 = g[0] / n as f32;
                    for o in acc(grads, *x, n).iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::Reshape { x } => {
                if needs(x) {
                    add_into(acc(grads, *x, numel(x)), g);
                }
            }
            Op::LayerNorm { x, gain, bias, normed, rstd } => {
                let d = numel(gain);
                let gv = val(gain);
                if needs(gain) {
                    let gg = acc(grads, *gain, d);
                    for (grow, nrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for ((o, gi), ni) in gg.iter_mut().zip(grow).zip(nrow) {
                            *o += gi * ni;
                        }
                    }
                }
                if needs(bias) {
                    let gb = acc(grads, *bias, d);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if needs(x) {
                    let gx = acc(grads, *x, numel(x));
                    let mut dxhat = vec![0.0f32; d];
                    for (r, (grow, nrow)) in g.chunks(d).zip(normed.chunks(d)).enumerate() {
                        let mut mean_dx = 0.0f64;
                        let mut mean_dxn = 0.0f64;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            mean_dx += dxhat[j] as f64;
                            mean_dxn += dxhat[j] as f64 * nrow[j] as f64;
                        }
                        let mean_dx = (mean_dx / d as f64) as f32;
                        let mean_dxn = (mean_dxn / d as f64) as f32;
                        let rs = rstd[r];
                        for (j, o) in gx[r * d..(r + 1) * d].iter_mut().enumerate() {
                            *o += rs * (dxhat[j] - mean_dx - nrow[j] * mean_dxn);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if needs(x) {
                    let vx = val(x);
                    for ((o, gi), xi) in acc(grads, *x, numel(x)).iter_mut().zip(g).zip(vx) {
                        *o += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::Softmax { x, outer, axis_len, inner } => {
                if needs(x) {
                    let y = nodes[i].value.data();
                    let gx = acc(grads, *x, numel(x));
                    for o in 0..*outer {
                        for inn in 0..*inner {
                            let at = |a: usize| (o * axis_len + a) * inner + inn;
                            let s: f64 = (0..*axis_len).map(|a| g[at(a)] as f64 * y[at(a)] as f64).sum();
                            let s = s as f32;
                            for a in 0..*axis_len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                }
            }
            Op::Attention { qkv, batch, tokens, heads, probs } => {
                if needs(qkv) {
                    attention_backward(val(qkv), g, probs, *batch, *tokens, *heads, acc(grads, *qkv, numel(qkv)));
                }
            }
            Op::CosineLoss { pred, target, eps } => {
                if needs(pred) {
                    let p = &nodes[pred.0].value;
                    let t = val(target);
                    let d = p.last_dim();
                    let rows = p.rows();
                    let scale = g[0] as f64 / rows.max(1) as f64;
                    let gp = acc(grads, *pred, p.numel());
                    for r in 0..rows {
                        let pr = &p.data()[r * d..(r + 1) * d];
                        let tr = &t[r * d..(r + 1) * d];
                        let (cos, np, nt, clamped) = row_cosine(pr, tr, *eps);
                        let denom = if clamped { *eps as f64 } else { np * nt };
                        for j in 0..d {
                            let mut dc = tr[j] as f64 / denom;
                            if !clamped {
                                dc -= cos * pr[j] as f64 / (np * np);
                            }
                            gp[r * d + j] -= (scale * dc) as f32;
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                if needs(pred) {
                    let n = numel(pred).max(1);
                    let scale = g[0] / n as f32;
                    let t = val(target);
                    let p = val(pred);
                    for ((o, pi), ti) in acc(grads, *pred, n).iter_mut().zip(p).zip(t) {
                        let e = pi - ti;
                        let d = if e.abs() < *beta { e / beta } else { e.signum() };
                        *o += scale * d;
                    }
                }
            }
            Op::MseLoss { pred, target } => {
                if needs(pred) {
                    let n = numel(pred).max(1);
                    let scale = 2.0 * g[0] / n as f32;
                    let t = val(target);
                    let p = val(pred);
                    for ((o, pi), ti) in acc(grads, *pred, n).iter_mut().zip(p).zip(t) {
                        *o += scale * (pi - ti);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(logits) {
                    let classes = nodes[logits.0].value.last_dim();
                    let scale = g[0] / labels.len().max(1) as f32;
                    let gl = acc(grads, *logits, numel(logits));
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Bicubic { x, dims, ys, xs } => {
                if needs(x) {
                    resize_backward(g, *dims, ys, xs, acc(grads, *x, numel(x)));
                }
            }
            Op::SelectRows { x, indices } => {
                if needs(x) {
                    let d = nodes[x.0].value.last_dim();
                    let gx = acc(grads, *x, numel(x));
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = numel(a);
                if needs(a) {
                    add_into(acc(grads, *a, na), &g[..na]);
                }
                if needs(b) {
                    add_into(acc(grads, *b, numel(b)), &g[na..]);
                }
            }
            Op::PrependRows { prefix, x, batch } => {
                let np = numel(prefix);
                let nx = numel(x);
                let per = nx / batch;
                if needs(prefix) {
                    let gp = acc(grads, *prefix, np);
                    for b in 0..*batch {
                        add_into(gp, &g[b * (np + per)..b * (np + per) + np]);
                    }
                }
                if needs(x) {
                    let gx = acc(grads, *x, nx);
                    for b in 0..*batch {
                        let start = b * (np + per) + np;
                        add_into(&mut gx[b * per..(b + 1) * per], &g[start..start + per]);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

/// Returns (cosine, |p|, |t|, denominator clamped to eps).
fn row_cosine(p: &[f32], t: &[f32], eps: f32) -> (f64, f64, f64, bool) {
    let np = dot(p, p).sqrt();
    let nt = dot(t, t).sqrt();
    let denom = np * nt;
    let clamped = denom < eps as f64;
    let cos = dot(p, t) / if clamped { eps as f64 } else { denom };
    (cos, np, nt, clamped)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qkv: &[f32],
    g: &[f32],
    probs: &[f32],
    batch: usize,
    tokens: usize,
    heads: usize,
    gqkv: &mut [f32],
) {
    let dim = qkv.len() / (batch * tokens) / 3;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let row = (3 * dim) as isize;
    let t = tokens as isize;
    let mut dp = vec![0.0f32; tokens * tokens];
    for b in 0..batch {
        let base = b * tokens * 3 * dim;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * tokens * tokens..][..tokens * tokens];
            let go = &g[b * tokens * dim + h * dh..];
            let q_off = base + h * dh;
            let k_off = base + dim + h * dh;
            let v_off = base + 2 * dim + h * dh;
            // dV = P^T · dO
            gemm(tokens, tokens, dh, p, (1, t), go, (dim as isize, 1), &mut gqkv[v_off..], (row, 1), true);
            // dP = dO · V^T
            gemm(tokens, dh, tokens, go, (dim as isize, 1), &qkv[v_off..], (1, row), &mut dp, (t, 1), false);
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the score scale.
            for r in 0..tokens {
                let pr = &p[r * tokens..(r + 1) * tokens];
                let dr = &mut dp[r * tokens..(r + 1) * tokens];
                let s: f64 = pr.iter().zip(dr.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
                let s = s as f32;
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - s) * scale;
                }
            }
            // dQ = dS · K ; dK = dS^T · Q
            gemm(tokens, tokens, dh, &dp, (t, 1), &qkv[k_off..], (row, 1), &mut gqkv[q_off..], (row, 1), true);
            gemm(tokens, tokens, dh, &dp, (1, t), &qkv[q_off..], (row, 1), &mut gqkv[k_off..], (row, 1), true);
        }
    }
}
