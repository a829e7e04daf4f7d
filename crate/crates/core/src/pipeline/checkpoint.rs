//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "DSTLCKPT"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 TOML
//! count      u32
//! count records:
//!     name_len u16, name bytes
//!     dtype    u8 (0 = f32)
//!     rank     u8, then rank x u32 dims
//!     data     product(dims) x f32
//! ```
//!
//! Record names: `encoder.<param>`, `head.<i>.class.<param>`,
//! `head.<i>.patch.<param>`, `stats.<i>.<stream>` and
//! `optim.m.<k>` / `optim.v.<k>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, StageConfig, StageKind};
use crate::data::ByteReader;
use crate::distill::{AdapterHead, TeacherStats};
use crate::encoder::{EncoderParams, ViTConfig};
use crate::error::{bail, Error, Result};
use crate::rng::StreamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DSTLCKPT";
const DTYPE_F32: u8 = 0;

/// Adapter heads and statistics for one teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRecord {
    pub name: String,
    pub gamma: f32,
    pub class_head: AdapterHead,
    pub patch_head: AdapterHead,
    pub stats: Option<TeacherStats>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngStates {
    pub data: StreamState,
    pub augment: StreamState,
    pub student_scale: StreamState,
    pub teacher_scale: StreamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Stage that produced the weights; `None` for freshly initialized ones.
    pub stage: Option<StageKind>,
    pub step: usize,
    pub encoder: EncoderParams,
    pub heads: Vec<HeadRecord>,
    pub stage_config: Option<StageConfig>,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngStates>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    name: String,
    gamma: f32,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    #[serde(default)]
    stats_samples: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: usize,
    #[serde(default)]
    stage: Option<StageKind>,
    #[serde(default)]
    adam_t: Option<u64>,
    encoder: ViTConfig,
    #[serde(default)]
    heads: Vec<HeadMeta>,
    #[serde(default)]
    rng: Option<RngStates>,
    #[serde(default)]
    stage_config: Option<StageConfig>,
}

impl Checkpoint {
    /// Weights only, as written for freshly initialized teachers.
    pub fn from_encoder(encoder: EncoderParams) -> Self {
        Checkpoint { stage: None, step: 0, encoder, heads: Vec::new(), stage_config: None, optimizer: None, rng: None }
    }

    /// Rejects checkpoints whose encoder does not match `config`.
    pub fn check_encoder(&self, config: &ViTConfig) -> Result<()> {
        if &self.encoder.config != config {
            let c = &self.encoder.config;
            bail!(
                Dimension,
                "checkpoint encoder (dim {}, depth {}, patch {}, image {}) does not match configured encoder (dim {}, depth {}, patch {}, image {})",
                c.dim,
                c.depth,
                c.patch_size,
                c.image_size,
                config.dim,
                config.depth,
                config.patch_size,
                config.image_size
            );
        }
        Ok(())
    }

    fn records(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.encoder.weights.named() {
            out.push((format!("encoder.{n}"), t));
        }
        for (i, h) in self.heads.iter().enumerate() {
            for (kind, head) in [("class", &h.class_head), ("patch", &h.patch_head)] {
                for (n, t) in head.named() {
                    out.push((format!("head.{i}.{kind}.{n}"), t));
                }
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            if let Some(s) = &h.stats {
                for (n, t) in s.named() {
                    out.push((format!("stats.{i}.{n}"), t));
                }
            }
        }
        if let Some(o) = &self.optimizer {
            for (k, t) in o.m.iter().enumerate() {
                out.push((format!("optim.m.{k}"), t));
            }
            for (k, t) in o.v.iter().enumerate() {
                out.push((format!("optim.v.{k}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            step: self.step,
            stage: self.stage,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            encoder: self.encoder.config.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadMeta {
                    name: h.name.clone(),
                    gamma: h.gamma,
                    d_in: h.class_head.in_dim(),
                    hidden: h.class_head.hidden(),
                    d_out: h.class_head.out_dim(),
                    stats_samples: h.stats.as_ref().map(|s| s.sample_count),
                })
                .collect(),
            rng: self.rng.clone(),
            stage_config: self.stage_config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Format(format!("cannot encode checkpoint metadata: {e}")))?;
        let records = self.records();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != MAGIC {
            bail!(Format, "not a checkpoint file (bad magic)");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let meta: Meta = toml::from_str(text).map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
        meta.encoder.validate()?;

        let count = r.u32()? as usize;
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if r.u8()? != DTYPE_F32 {
                bail!(Format, "tensor {name} has an unsupported dtype");
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.filter(|&n| n <= bytes.len() / 4) else {
                bail!(Truncated, "tensor {name} declares more data than the file holds");
            };
            let t = Tensor::new(dims, r.f32s(numel)?)?;
            if tensors.insert(name.clone(), t).is_some() {
                bail!(Format, "duplicate tensor record {name}");
            }
        }
        if !r.finished() {
            bail!(Format, "trailing bytes after the last tensor record");
        }

        fn take(tensors: &mut BTreeMap<String, Tensor>, name: String, like: &Tensor) -> Result<Tensor> {
            match tensors.remove(&name) {
                Some(t) if t.shape() == like.shape() => Ok(t),
                Some(t) => bail!(Dimension, "{name}: expected shape {:?}, found {:?}", like.shape(), t.shape()),
                None => bail!(Format, "checkpoint is missing tensor {name}"),
            }
        }

        let mut encoder = EncoderParams::zeros(&meta.encoder)?;
        for (n, slot) in encoder.weights.named_mut() {
            *slot = take(&mut tensors, format!("encoder.{n}"), slot)?;
        }
        let mut heads = Vec::with_capacity(meta.heads.len());
        for (i, h) in meta.heads.iter().enumerate() {
            let mut class_head = AdapterHead::zeros(h.d_in, h.hidden, h.d_out);
            let mut patch_head = class_head.clone();
            for (kind, head) in [("class", &mut class_head), ("patch", &mut patch_head)] {
                for (n, slot) in head.named_mut() {
                    *slot = take(&mut tensors, format!("head.{i}.{kind}.{n}"), slot)?;
                }
            }
            heads.push(HeadRecord { name: h.name.clone(), gamma: h.gamma, class_head, patch_head, stats: None });
        }
        for (i, h) in meta.heads.iter().enumerate() {
            if let Some(samples) = h.stats_samples {
                let mut stats = TeacherStats::identity(h.d_out);
                stats.sample_count = samples;
                stats.class_mean = take(&mut tensors, format!("stats.{i}.class_mean"), &stats.class_mean)?;
                stats.class_std = take(&mut tensors, format!("stats.{i}.class_std"), &stats.class_std)?;
                stats.patch_mean = take(&mut tensors, format!("stats.{i}.patch_mean"), &stats.patch_mean)?;
                stats.patch_std = take(&mut tensors, format!("stats.{i}.patch_std"), &stats.patch_std)?;
                heads[i].stats = Some(stats);
            }
        }
        let optimizer = match meta.adam_t {
            None => None,
            Some(t) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                let mut k = 0;
                while let Some(mk) = tensors.remove(&format!("optim.m.{k}")) {
                    let vk = take(&mut tensors, format!("optim.v.{k}"), &mk)?;
                    m.push(mk);
                    v.push(vk);
                    k += 1;
                }
                Some(AdamState { t, m, v })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            bail!(Format, "unexpected tensor record {extra}");
        }
        Ok(Checkpoint {
            stage: meta.stage,
            step: meta.step,
            encoder,
            heads,
            stage_config: meta.stage_config,
            optimizer,
            rng: meta.rng,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
