//! Multi-teacher feature distillation for toy vision transformers.
//!
//! Teachers are distilled into a high-capacity proxy encoder, the proxy is
//! distilled into a small student at a fixed resolution, and the student is
//! finally fine-tuned across a resolution pyramid. Frozen-feature evaluation
//! protocols (KNN, prototype zero-shot, dense linear probes, keypoint
//! correspondence, PCA visualization) measure the resulting encoders.

pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
