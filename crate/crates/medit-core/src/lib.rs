//! Instruction-optimized image editing at desk scale.
//!
//! A tiny multimodal language model reads a source image plus a rough edit
//! request and produces two steering signals: a rewritten, precise edit
//! instruction and a visual insight embedding. A small latent diffusion
//! model consumes both through decoupled cross-attention and applies the
//! edit. Everything here (tensors, autodiff, models, training, metrics,
//! synthetic data) is self-contained and deterministic given a seed.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod editpipe;
pub mod embedder;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod mml;
pub mod nn;
pub mod synthdata;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testkit;
pub mod train;

pub use error::{Error, ErrorKind, Result};
