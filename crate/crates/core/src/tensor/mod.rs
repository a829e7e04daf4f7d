//! Dense f32 tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain row-major buffer with an optional gradient.
//! Differentiable computation happens on a [`Tape`]: every operation appends a
//! node holding its output value, and [`Tape::backward`] walks the nodes in
//! reverse to accumulate gradients into every node that requires one.

pub(crate) mod interp;
pub(crate) mod kernels;
mod tape;

pub use interp::{bicubic_resize, catmull_rom, resample_taps, ResampleTaps, BICUBIC_A};
pub use tape::{Tape, Var};

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            );
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                bail!(Dimension, "gradient of length {} for tensor of {} values", g.len(), self.data.len());
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
