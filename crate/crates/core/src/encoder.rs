//! Toy vision-transformer encoders.
//!
//! A pre-norm ViT with learned absolute positional embeddings, a class
//! token and optional register tokens. The same architecture serves as
//! teacher, proxy and student; only [`ViTConfig`] differs.
//!
//! Register tokens take part in attention but never appear in an
//! [`EncoderOutput`]. When an image's token grid differs from the grid the
//! model was configured for, the patch positional embeddings are resized
//! with the bicubic primitive.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{self, trunc_normal};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default)]
    pub num_registers: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig { image_size: 32, patch_size: 8, dim: 64, depth: 4, heads: 4, num_registers: 0, mlp_ratio: 4.0 }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "image size {} is not divisible by patch size {}", self.image_size, self.patch_size);
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            bail!(Config, "dim {} is not divisible by {} heads", self.dim, self.heads);
        }
        if !(self.mlp_ratio > 0.0) {
            bail!(Config, "mlp ratio must be positive, got {}", self.mlp_ratio);
        }
        Ok(())
    }

    /// Side of the square token grid at the configured resolution.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Class token, registers, then patches.
    pub fn prefix_tokens(&self) -> usize {
        1 + self.num_registers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

/// All encoder weights, generic over storage so the same layout serves for
/// owned tensors and for their handles on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub cls_token: T,
    pub cls_pos: T,
    pub registers: Option<T>,
    pub pos_embed: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_gain: T,
    pub norm_bias: T,
}

impl<T> BlockWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("norm1.gain", &self.norm1_gain),
            ("norm1.bias", &self.norm1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("norm2.gain", &self.norm2_gain),
            ("norm2.bias", &self.norm2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 12] {
        [
            ("norm1.gain", &mut self.norm1_gain),
            ("norm1.bias", &mut self.norm1_bias),
            ("attn.qkv.weight", &mut self.qkv_weight),
            ("attn.qkv.bias", &mut self.qkv_bias),
            ("attn.proj.weight", &mut self.proj_weight),
            ("attn.proj.bias", &mut self.proj_bias),
            ("norm2.gain", &mut self.norm2_gain),
            ("norm2.bias", &mut self.norm2_bias),
            ("mlp.fc1.weight", &mut self.fc1_weight),
            ("mlp.fc1.bias", &mut self.fc1_bias),
            ("mlp.fc2.weight", &mut self.fc2_weight),
            ("mlp.fc2.bias", &mut self.fc2_bias),
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockWeights<U> {
        BlockWeights {
            norm1_gain: f(&self.norm1_gain),
            norm1_bias: f(&self.norm1_bias),
            qkv_weight: f(&self.qkv_weight),
            qkv_bias: f(&self.qkv_bias),
            proj_weight: f(&self.proj_weight),
            proj_bias: f(&self.proj_bias),
            norm2_gain: f(&self.norm2_gain),
            norm2_bias: f(&self.norm2_bias),
            fc1_weight: f(&self.fc1_weight),
            fc1_bias: f(&self.fc1_bias),
            fc2_weight: f(&self.fc2_weight),
            fc2_bias: f(&self.fc2_bias),
        }
    }
}

impl<T> EncoderWeights<T> {
    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
            ("cls_pos".into(), &self.cls_pos),
        ];
        if let Some(r) = &self.registers {
            out.push(("registers".into(), r));
        }
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.fields() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("norm.gain".into(), &self.norm_gain));
        out.push(("norm.bias".into(), &self.norm_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("cls_token".into(), &mut self.cls_token),
            ("cls_pos".into(), &mut self.cls_pos),
        ];
        if let Some(r) = &mut self.registers {
            out.push(("registers".into(), r));
        }
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, t) in block.fields_mut() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("norm.gain".into(), &mut self.norm_gain));
        out.push(("norm.bias".into(), &mut self.norm_bias));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            patch_weight: f(&self.patch_weight),
            patch_bias: f(&self.patch_bias),
            cls_token: f(&self.cls_token),
            cls_pos: f(&self.cls_pos),
            registers: self.registers.as_ref().map(&mut f),
            pos_embed: f(&self.pos_embed),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
        }
    }
}

/// A configured encoder and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: ViTConfig,
    pub weights: EncoderWeights<Tensor>,
}

/// Closed-form parameter count of an encoder with `config`.
pub fn count_params(config: &ViTConfig) -> usize {
    let d = config.dim;
    let h = config.mlp_hidden();
    let stem = config.patch_dim() * d + d;
    let tokens = 2 * d + config.num_registers * d + config.num_patches() * d;
    let block = 4 * d * d + 2 * d * h + 9 * d + h;
    stem + tokens + config.depth * block + 2 * d
}

impl EncoderParams {
    /// Layout with every tensor zero (layer-norm gains one).
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        Self::build(config, &mut |shape, kind| match kind {
            InitKind::Weight | InitKind::Bias => Tensor::zeros(shape),
            InitKind::Gain => Tensor::ones(shape),
        })
    }

    /// Truncated-normal weights (std 0.02), zero biases, unit norm gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, 0);
        Self::build(config, &mut |shape, kind| match kind {
            InitKind::Weight => Tensor::from_fn(shape, |_| trunc_normal(&mut rng, INIT_STD)),
            InitKind::Bias => Tensor::zeros(shape),
            InitKind::Gain => Tensor::ones(shape),
        })
    }

    fn build(config: &ViTConfig, make: &mut dyn FnMut(Vec<usize>, InitKind) -> Tensor) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.mlp_hidden();
        use InitKind::*;
        let patch_weight = make(vec![config.patch_dim(), d], Weight);
        let patch_bias = make(vec![d], Bias);
        let cls_token = make(vec![d], Weight);
        let cls_pos = make(vec![d], Weight);
        let registers = (config.num_registers > 0).then(|| make(vec![config.num_registers, d], Weight));
        let pos_embed = make(vec![config.num_patches(), d], Weight);
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                norm1_gain: make(vec![d], Gain),
                norm1_bias: make(vec![d], Bias),
                qkv_weight: make(vec![d, 3 * d], Weight),
                qkv_bias: make(vec![3 * d], Bias),
                proj_weight: make(vec![d, d], Weight),
                proj_bias: make(vec![d], Bias),
                norm2_gain: make(vec![d], Gain),
                norm2_bias: make(vec![d], Bias),
                fc1_weight: make(vec![d, h], Weight),
                fc1_bias: make(vec![h], Bias),
                fc2_weight: make(vec![h, d], Weight),
                fc2_bias: make(vec![d], Bias),
            })
            .collect();
        let norm_gain = make(vec![d], Gain);
        let norm_bias = make(vec![d], Bias);
        Ok(EncoderParams {
            config: config.clone(),
            weights: EncoderWeights {
                patch_weight,
                patch_bias,
                cls_token,
                cls_pos,
                registers,
                pos_embed,
                blocks,
                norm_gain,
                norm_bias,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every weight on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderWeights<Var> {
        self.weights.map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }

    /// Overwrites the named tensor, checking its shape.
    pub fn set_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (n, t) in self.weights.named_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    bail!(Dimension, "{name}: expected shape {:?}, got {:?}", t.shape(), value.shape());
                }
                *t = value;
                return Ok(());
            }
        }
        bail!(Format, "unknown encoder tensor {name}")
    }
}

#[derive(Clone, Copy)]
enum InitKind {
    Weight,
    Bias,
    Gain,
}

/// Class token plus the patch-token grid of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub class_token: Tensor,
    pub patch_tokens: Tensor,
    pub grid: (usize, usize),
}

/// Encoder outputs for a batch, as handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    /// `[batch, dim]`
    pub class: Var,
    /// `[batch * rows * cols, dim]`, images in order, grid row-major.
    pub patch: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

/// Splits an `[H, W, 3]` image into flattened non-overlapping patches,
/// `[N, 3 * p * p]`, grid in row-major order and each patch laid out as
/// `(row, col, channel)`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (h, w) = image_hw(image)?;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        bail!(Dimension, "image {h}x{w} is not divisible into {patch_size}px patches");
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let pd = 3 * patch_size * patch_size;
    let mut out = Vec::with_capacity(rows * cols * pd);
    let src = image.data();
    for gr in 0..rows {
        for gc in 0..cols {
            for py in 0..patch_size {
                let y = gr * patch_size + py;
                let start = (y * w + gc * patch_size) * 3;
                out.extend_from_slice(&src[start..start + 3 * patch_size]);
            }
        }
    }
    Tensor::new(vec![rows * cols, pd], out)
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => bail!(Dimension, "expected an [H, W, 3] image, got {:?}", image.shape()),
    }
}

/// Batched forward pass on `tape`. All images must share one resolution.
pub fn forward_tokens(
    tape: &mut Tape,
    config: &ViTConfig,
    w: &EncoderWeights<Var>,
    images: &[Tensor],
) -> Result<TokenBatch> {
    let Some(first) = images.first() else {
        bail!(Parameter, "forward needs at least one image");
    };
    let (h, wd) = image_hw(first)?;
    let p = config.patch_size;
    if h % p != 0 || wd % p != 0 {
        bail!(Dimension, "resolution {h}x{wd} incompatible with patch size {p}");
    }
    let (rows, cols) = (h / p, wd / p);
    let n = rows * cols;
    let batch = images.len();
    let d = config.dim;

    let mut patch_data = Vec::with_capacity(batch * n * config.patch_dim());
    for img in images {
        if img.shape() != first.shape() {
            bail!(Dimension, "mixed resolutions in one batch: {:?} vs {:?}", first.shape(), img.shape());
        }
        patch_data.extend_from_slice(patchify(img, p)?.data());
    }
    let patches = tape.constant(Tensor::new(vec![batch * n, config.patch_dim()], patch_data)?);
    let x = tape.matmul(patches, w.patch_weight)?;
    let x = tape.add_tiled(x, w.patch_bias)?;

    let g = config.grid_side();
    let pos = if (rows, cols) == (g, g) {
        w.pos_embed
    } else {
        if g < 2 {
            bail!(Dimension, "cannot resize a {g}x{g} positional grid to {rows}x{cols}");
        }
        let grid = tape.reshape(w.pos_embed, &[g, g, d])?;
        let resized = tape.bicubic_resize(grid, rows, cols)?;
        tape.reshape(resized, &[n, d])?
    };
    let x = tape.add_tiled(x, pos)?;

    let cls = tape.add(w.cls_token, w.cls_pos)?;
    let mut prefix = tape.reshape(cls, &[1, d])?;
    if let Some(r) = w.registers {
        prefix = tape.concat_rows(prefix, r)?;
    }
    let mut x = tape.prepend_rows(prefix, x, batch)?;
    let tokens = config.prefix_tokens() + n;

    for b in &w.blocks {
        let hn = tape.layer_norm(x, b.norm1_gain, b.norm1_bias, LAYER_NORM_EPS)?;
        let qkv = tape.matmul(hn, b.qkv_weight)?;
        let qkv = tape.add_tiled(qkv, b.qkv_bias)?;
        let att = tape.attention(qkv, batch, tokens, config.heads)?;
        let out = tape.matmul(att, b.proj_weight)?;
        let out = tape.add_tiled(out, b.proj_bias)?;
        x = tape.add(x, out)?;

        let hn = tape.layer_norm(x, b.norm2_gain, b.norm2_bias, LAYER_NORM_EPS)?;
        let f = tape.matmul(hn, b.fc1_weight)?;
        let f = tape.add_tiled(f, b.fc1_bias)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, b.fc2_weight)?;
        let f = tape.add_tiled(f, b.fc2_bias)?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm(x, w.norm_gain, w.norm_bias, LAYER_NORM_EPS)?;

    let class_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let patch_rows: Vec<usize> = (0..batch)
        .flat_map(|b| (0..n).map(move |j| b * tokens + config.prefix_tokens() + j))
        .collect();
    let class = tape.select_rows(x, &class_rows)?;
    let patch = tape.select_rows(x, &patch_rows)?;
    Ok(TokenBatch { class, patch, batch, grid: (rows, cols) })
}

/// Gradient-free forward of a batch, returning plain `[B, d]` class tokens
/// and `[B * N, d]` patch tokens.
pub fn encode_batch(params: &EncoderParams, images: &[Tensor]) -> Result<(Tensor, Tensor, (usize, usize))> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let out = forward_tokens(&mut tape, &params.config, &w, images)?;
    let class = tape.take(out.class);
    let patch = tape.take(out.patch);
    Ok((class, patch, out.grid))
}

/// Single-image forward pass.
pub fn vit_forward(params: &EncoderParams, image: &Tensor) -> Result<EncoderOutput> {
    Ok(encode(params, std::slice::from_ref(image))?.remove(0))
}

/// Per-image outputs for a set of same-resolution images, evaluated in
/// chunks to bound tape memory.
pub fn encode(params: &EncoderParams, images: &[Tensor]) -> Result<Vec<EncoderOutput>> {
    const CHUNK: usize = 64;
    let d = params.config.dim;
    let mut outputs = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let (class, patch, grid) = encode_batch(params, chunk)?;
        let n = grid.0 * grid.1;
        for b in 0..chunk.len() {
            outputs.push(EncoderOutput {
                class_token: Tensor::new(vec![d], class.row(b).to_vec())?,
                patch_tokens: Tensor::new(vec![n, d], patch.data()[b * n * d..(b + 1) * n * d].to_vec())?,
                grid,
            });
        }
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ViTConfig::default();
        assert!(c.validate().is_ok());
        c.image_size = 30;
        assert!(c.validate().is_err());
        c.image_size = 32;
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn named_order_is_stable() {
        let p = EncoderParams::zeros(&ViTConfig { num_registers: 2, depth: 1, ..Default::default() }).unwrap();
        let names: Vec<String> = p.weights.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "patch_embed.weight");
        assert!(names.contains(&"registers".to_string()));
        assert_eq!(names.last().unwrap(), "norm.bias");
        assert_eq!(names.len(), 6 + 12 + 2);
    }

    #[test]
    fn set_named_checks_shape() {
        let mut p = EncoderParams::zeros(&ViTConfig::default()).unwrap();
        assert!(p.set_named("norm.gain", Tensor::zeros([3])).is_err());
        assert!(p.set_named("nope", Tensor::zeros([64])).is_err());
        p.set_named("norm.gain", Tensor::full([64], 2.0)).unwrap();
        assert_eq!(p.weights.norm_gain.data()[0], 2.0);
    }
}
