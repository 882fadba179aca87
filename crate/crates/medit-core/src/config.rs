//! Run configuration: one JSON document with a section per subsystem.
//!
//! Unknown keys are rejected so typos fail loudly, every run re-serializes
//! the resolved config next to its outputs, and all defaults live here in
//! one place. Sizes follow the desk-scale reference setup; the larger
//! originals they stand in for are noted in the field docs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub embedder: EmbedderConfig,
    pub autoencoder: AutoencoderConfig,
    pub diffusion: DiffusionConfig,
    pub mml: MmlSection,
    pub edit: EditConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus root; splits live in train/ and test/ beneath it.
    pub dir: String,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: "data".into(), train: 5000, test: 500, seed: 11 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub dir: String,
    /// Output embedding dimension d_e.
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dir: "runs/embedder".into(),
            dim: 64,
            epochs: 10,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 0.0,
            seed: 21,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub dir: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Mean reconstruction error (per-pixel mse) the trained autoencoder is
    /// expected to reach on held-out images; training warns when missed.
    /// Set from a pilot run on the default corpus.
    pub recon_tolerance: f32,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            dir: "runs/autoencoder".into(),
            epochs: 15,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 0.0,
            recon_tolerance: 0.01,
            seed: 31,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub dir: String,
    /// Number of diffusion steps T.
    pub timesteps: usize,
    pub beta_start: f32,
    /// On the default 200-step schedule the cumulative signal level decays
    /// to about 0.13 at the final step while staying above 0.99 at the
    /// first. Pushing beta_end higher trades away the precision of the
    /// noising/denoising algebra (1/sqrt(alpha_bar) amplifies f32 rounding).
    pub beta_end: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            dir: "runs/diffusion".into(),
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            epochs: 30,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 0.0,
            seed: 41,
        }
    }
}

/// Architecture and training settings for the instruction model. The
/// full-scale reference regime (28 layers, tap 21, 5 epochs, batch 8,
/// lr 1e-5 on a pretrained 7B trunk) shrinks here to an 8-layer trunk
/// trained from scratch, keeping the 0.75 tap-depth fraction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MmlSection {
    pub dir: String,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Patch edge in pixels; 32x32 inputs become (32/patch)^2 tokens.
    pub patch: usize,
    /// Hidden layer feeding the vision head; defaults to ceil(0.75·layers).
    pub tap_layer: Option<usize>,
    /// Must match embedder.dim.
    pub embed_dim: usize,
    /// Weight of the embedding loss inside the joint objective.
    pub lambda: f32,
    /// Generation cap for optimized instructions, in tokens.
    pub max_target_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for MmlSection {
    fn default() -> Self {
        MmlSection {
            dir: "runs/mml".into(),
            layers: 8,
            d_model: 128,
            heads: 4,
            patch: 4,
            tap_layer: None,
            embed_dim: 64,
            lambda: 2.0,
            max_target_len: 48,
            epochs: 20,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.0,
            seed: 51,
        }
    }
}

impl MmlSection {
    /// Tap layer m, defaulted to ceil(0.75·layers).
    pub fn tap(&self) -> usize {
        self.tap_layer.unwrap_or_else(|| (3 * self.layers).div_ceil(4))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig { seed: 61 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub dir: String,
    /// Feed the corpus edit mask through the pipeline (the pipeline also
    /// works unmasked; corpus masks are ground truth).
    pub use_mask: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { dir: "runs/eval".into(), use_mask: true, seed: 71 }
    }
}

/// The ablation harness trains three instruction-model variants plus a
/// decoder, so it runs on its own smaller corpus and budget: it probes
/// wiring and conditioning provenance, not headline quality.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub dir: String,
    pub train: usize,
    pub test: usize,
    pub mml_epochs: usize,
    pub diffusion_epochs: usize,
    pub autoencoder_epochs: usize,
    pub embedder_epochs: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dir: "runs/ablation".into(),
            train: 300,
            test: 60,
            mml_epochs: 4,
            diffusion_epochs: 8,
            autoencoder_epochs: 8,
            embedder_epochs: 6,
            seed: 81,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully resolved config; every artifact-producing run calls
    /// this so outputs are reproducible from their own directory.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("{key}: {why}")));
        if self.data.train == 0 || self.data.test == 0 {
            return bad("data.train/test", "must be positive".into());
        }
        if self.embedder.dim == 0 {
            return bad("embedder.dim", "must be positive".into());
        }
        if self.embedder.batch_size < 2 {
            return bad("embedder.batch_size", "contrastive batches need at least 2".into());
        }
        if self.mml.embed_dim != self.embedder.dim {
            return bad(
                "mml.embed_dim",
                format!("{} does not match embedder.dim {}", self.mml.embed_dim, self.embedder.dim),
            );
        }
        if self.mml.layers == 0 || self.mml.d_model == 0 || self.mml.heads == 0 {
            return bad("mml", "layers, d_model, heads must be positive".into());
        }
        if self.mml.d_model % self.mml.heads != 0 {
            return bad(
                "mml.heads",
                format!("{} does not divide d_model {}", self.mml.heads, self.mml.d_model),
            );
        }
        if self.mml.patch == 0 || 32 % self.mml.patch != 0 {
            return bad("mml.patch", format!("{} must divide the 32-pixel canvas", self.mml.patch));
        }
        let tap = self.mml.tap();
        if tap == 0 || tap >= self.mml.layers {
            return bad("mml.tap_layer", format!("{tap} outside 1..{}", self.mml.layers));
        }
        if self.mml.lambda < 0.0 {
            return bad("mml.lambda", "must be nonnegative".into());
        }
        if self.mml.max_target_len == 0 {
            return bad("mml.max_target_len", "must be positive".into());
        }
        if self.diffusion.timesteps == 0 {
            return bad("diffusion.timesteps", "must be positive".into());
        }
        for (key, v) in [
            ("diffusion.beta_start", self.diffusion.beta_start),
            ("diffusion.beta_end", self.diffusion.beta_end),
        ] {
            if !(0.0 < v && v < 1.0) {
                return bad(key, format!("{v} outside (0, 1)"));
            }
        }
        if self.diffusion.beta_start > self.diffusion.beta_end {
            return bad("diffusion.beta_start", "exceeds beta_end".into());
        }
        let tol = self.autoencoder.recon_tolerance;
        if !(tol > 0.0 && tol.is_finite()) {
            return bad("autoencoder.recon_tolerance", format!("{tol} must be positive"));
        }
        for (key, lr) in [
            ("embedder.lr", self.embedder.lr),
            ("autoencoder.lr", self.autoencoder.lr),
            ("diffusion.lr", self.diffusion.lr),
            ("mml.lr", self.mml.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, format!("{lr} must be positive and finite"));
            }
        }
        for (key, n) in [
            ("embedder.batch_size", self.embedder.batch_size),
            ("autoencoder.batch_size", self.autoencoder.batch_size),
            ("diffusion.batch_size", self.diffusion.batch_size),
            ("mml.batch_size", self.mml.batch_size),
            ("ablation.train", self.ablation.train),
            ("ablation.test", self.ablation.test),
        ] {
            if n == 0 {
                return bad(key, "must be positive".into());
            }
        }
        Ok(())
    }
}
