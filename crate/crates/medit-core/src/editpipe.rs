//! End-to-end image editing: instruction model -> embedder text features ->
//! conditioned latent diffusion -> decoded image.
//!
//! Two request flags select the conditioning sources. `use_t_opt` routes the
//! rough request through the instruction model and feeds the optimized
//! caption to the decoder's text branch (off: the raw request is fed
//! directly). `use_v_insight` attaches the instruction model's insight
//! vector to the decoder's image branch (off: a zero row, which the
//! decoupled-attention algebra turns into exactly no contribution). Each
//! stage runs only when its flag asks for it, so the output is provably
//! independent of model parts whose flag is off.
//!
//! The instruction-generating model and the insight-producing model are held
//! as separate slots. Normal use loads the same checkpoint into both; the
//! conditioning-provenance ablation loads different training variants.

use std::path::Path;
use std::time::Instant;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diffusion::autoencoder::Autoencoder;
use crate::diffusion::{latent_mask, unet::UNet, SampleRequest, Schedule};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::mml::{MmlModel, OptimizedInstruction, Vocabulary};
use crate::nn::ParamStore;
use crate::tensor::rng::{Rng, StreamKind};
use crate::tensor::Tensor;
use crate::train::{DiffusionMeta, EMBEDDER_HASH_KEY, UNET_HEADS};

/// One editing job.
#[derive(Debug, Clone)]
pub struct EditRequest {
    /// Source image, [3, 32, 32] in [0, 1].
    pub i_src: Tensor,
    /// Rough edit request in corpus vocabulary.
    pub t_raw: String,
    /// Optional [32, 32] binary mask; 1 marks pixels free to change.
    pub mask: Option<Tensor>,
    pub seed: u64,
    /// Generate an optimized instruction and condition text on it.
    pub use_t_opt: bool,
    /// Condition the decoder's image branch on the insight vector.
    pub use_v_insight: bool,
    /// Sampler steps. The v1 sampler always walks the trained schedule, so
    /// this must equal its length; the field exists to make that contract
    /// explicit at the call site.
    pub steps: usize,
}

impl EditRequest {
    /// A request with both conditioning stages on and the sampler step count
    /// taken from the models' trained schedule.
    pub fn new(models: &EditModels, i_src: Tensor, t_raw: impl Into<String>, seed: u64) -> Self {
        EditRequest {
            i_src,
            t_raw: t_raw.into(),
            mask: None,
            seed,
            use_t_opt: true,
            use_v_insight: true,
            steps: models.schedule.len(),
        }
    }
}

/// Wall-clock milliseconds spent in each stage of one edit.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct StageTimings {
    pub instruction_ms: f64,
    pub insight_ms: f64,
    pub conditioning_ms: f64,
    pub sampling_ms: f64,
    pub decode_ms: f64,
}

/// What one edit produced. The optional fields are present exactly when the
/// corresponding request flag was on.
#[derive(Debug, Clone)]
pub struct EditResult {
    /// Edited image, [3, 32, 32] in [0, 1].
    pub image: Tensor,
    pub t_opt: Option<OptimizedInstruction>,
    /// True when instruction generation hit its length cap before EOS.
    pub truncated: bool,
    /// Insight row [1, embed_dim].
    pub v_insight: Option<Tensor>,
    pub timings: StageTimings,
    /// Echo of the request seed (sole randomness source of the edit).
    pub seed: u64,
}

/// Frozen model set an edit runs against.
pub struct EditModels {
    pub vocab: Vocabulary,
    pub embedder: Embedder,
    pub embedder_store: ParamStore,
    /// Generates optimized instructions (text head side).
    pub instruction: MmlModel,
    pub instruction_store: ParamStore,
    /// Produces insight vectors (vision head side).
    pub insight: MmlModel,
    pub insight_store: ParamStore,
    pub unet: UNet,
    pub unet_store: ParamStore,
    pub autoencoder_store: ParamStore,
    pub meta: DiffusionMeta,
    pub schedule: Schedule,
}

fn check_recorded_embedder(what: &str, path: &Path, store: &ParamStore, emb_hash: &[u8; 32]) -> Result<()> {
    let recorded = checkpoint::read_dependency_hash(store, EMBEDDER_HASH_KEY)?;
    if recorded != *emb_hash {
        return Err(Error::config(format!(
            "{what} checkpoint {} was trained against embedder {}, but the loaded embedder is {}",
            path.display(),
            checkpoint::hash_hex(&recorded),
            checkpoint::hash_hex(emb_hash)
        )));
    }
    Ok(())
}

impl EditModels {
    /// Load the standard arrangement: one instruction-model checkpoint
    /// serving both the text and insight roles.
    pub fn load(
        cfg: &RunConfig,
        embedder_ckpt: &Path,
        mml_ckpt: &Path,
        autoencoder_ckpt: &Path,
        diffusion_ckpt: &Path,
    ) -> Result<EditModels> {
        Self::load_split(cfg, embedder_ckpt, mml_ckpt, mml_ckpt, autoencoder_ckpt, diffusion_ckpt)
    }

    /// Load with separate instruction and insight checkpoints (the ablation
    /// rows that mix conditioning provenance need this). Every checkpoint's
    /// recorded embedder hash must match the loaded embedder.
    pub fn load_split(
        cfg: &RunConfig,
        embedder_ckpt: &Path,
        instruction_ckpt: &Path,
        insight_ckpt: &Path,
        autoencoder_ckpt: &Path,
        diffusion_ckpt: &Path,
    ) -> Result<EditModels> {
        let vocab = Vocabulary::core();
        let (embedder_store, emb_hash) = checkpoint::load(embedder_ckpt)?;
        let embedder = Embedder::new(cfg.embedder.dim, vocab.len())?;

        let model = MmlModel::from_config(&cfg.mml, &vocab)?;
        let (instruction_store, _) = checkpoint::load(instruction_ckpt)?;
        check_recorded_embedder("instruction", instruction_ckpt, &instruction_store, &emb_hash)?;
        let insight_store = if insight_ckpt == instruction_ckpt {
            instruction_store.clone()
        } else {
            let (s, _) = checkpoint::load(insight_ckpt)?;
            check_recorded_embedder("insight", insight_ckpt, &s, &emb_hash)?;
            s
        };

        let (autoencoder_store, ae_hash) = checkpoint::load(autoencoder_ckpt)?;
        let (unet_store, _) = checkpoint::load(diffusion_ckpt)?;
        let meta = DiffusionMeta::read(&unet_store)?;
        if meta.embedder_hash != emb_hash {
            return Err(Error::config(format!(
                "decoder checkpoint {} was trained against embedder {}, but the loaded embedder is {}",
                diffusion_ckpt.display(),
                checkpoint::hash_hex(&meta.embedder_hash),
                checkpoint::hash_hex(&emb_hash)
            )));
        }
        if meta.autoencoder_hash != ae_hash {
            return Err(Error::config(format!(
                "decoder checkpoint {} was trained against autoencoder {}, but the loaded autoencoder is {}",
                diffusion_ckpt.display(),
                checkpoint::hash_hex(&meta.autoencoder_hash),
                checkpoint::hash_hex(&ae_hash)
            )));
        }
        let schedule = crate::train::schedule_from_meta(&meta)?;
        let unet = UNet::new(cfg.embedder.dim, UNET_HEADS)?;
        Ok(EditModels {
            vocab,
            embedder,
            embedder_store,
            instruction: model,
            instruction_store,
            insight: model,
            insight_store,
            unet,
            unet_store,
            autoencoder_store,
            meta,
            schedule,
        })
    }
}

fn ms(from: Instant) -> f64 {
    from.elapsed().as_secs_f64() * 1e3
}

/// Run one edit. Stages run strictly by flag: with `use_t_opt` off the
/// instruction model's text side is never invoked, and with `use_v_insight`
/// off its vision side is never invoked (the decoder sees a zero insight
/// row, which contributes nothing by construction).
pub fn edit(models: &EditModels, req: &EditRequest) -> Result<EditResult> {
    if req.i_src.shape != [3, 32, 32] {
        return Err(Error::shape(format!("edit: source image {:?}, want [3, 32, 32]", req.i_src.shape)));
    }
    if req.steps != models.schedule.len() {
        return Err(Error::parameter(format!(
            "edit: {} sampler steps requested, but the decoder was trained on a {}-step schedule (partial walks are not supported)",
            req.steps,
            models.schedule.len()
        )));
    }
    let raw_tokens = models.vocab.encode(&req.t_raw)?;
    let mut timings = StageTimings::default();

    let mut t_opt = None;
    let mut truncated = false;
    if req.use_t_opt {
        let clock = Instant::now();
        let prompt = models.instruction.encode_prompt(&req.i_src, &raw_tokens)?;
        let generated = models.instruction.generate(&models.instruction_store, &prompt)?;
        truncated = generated.truncated;
        t_opt = Some(OptimizedInstruction::from_token_ids(&models.vocab, &generated.tokens)?);
        timings.instruction_ms = ms(clock);
    }

    let dim = models.embedder.dim;
    let mut v_insight = None;
    if req.use_v_insight {
        let clock = Instant::now();
        let prompt = models.insight.encode_prompt(&req.i_src, &raw_tokens)?;
        let v = models.insight.insight_vector(&models.insight_store, &prompt)?;
        v_insight = Some(v.reshaped(&[1, dim])?);
        timings.insight_ms = ms(clock);
    }

    let clock = Instant::now();
    let caption = match &t_opt {
        Some(instruction) => instruction.caption(),
        None => req.t_raw.clone(),
    };
    let caption_tokens = models.vocab.encode(&caption)?;
    if caption_tokens.is_empty() {
        return Err(Error::vocab(
            "conditioning caption is empty (no usable phrases to feed the decoder)",
        ));
    }
    let text = models.embedder.text_features(&models.embedder_store, &caption_tokens)?;
    let insight = match &v_insight {
        Some(v) => v.clone(),
        None => Tensor::zeros(&[1, dim]),
    };
    let scale = models.meta.latent_scale;
    let src_latent =
        Autoencoder::encode_image(&models.autoencoder_store, &req.i_src)?.scale(1.0 / scale);
    let lmask = match &req.mask {
        Some(m) => Some(latent_mask(m)?),
        None => None,
    };
    timings.conditioning_ms = ms(clock);

    let clock = Instant::now();
    let mut rng = Rng::stream(req.seed, StreamKind::Noise, 0);
    let z = models.unet.sample(
        &models.unet_store,
        &models.schedule,
        &SampleRequest {
            src_latent: &src_latent,
            text: &text,
            insight: &insight,
            mask: lmask.as_ref(),
        },
        &mut rng,
    )?;
    timings.sampling_ms = ms(clock);

    let clock = Instant::now();
    let image = Autoencoder::decode_latent(&models.autoencoder_store, &z.scale(scale))?;
    timings.decode_ms = ms(clock);

    Ok(EditResult { image, t_opt, truncated, v_insight, timings, seed: req.seed })
}

/// Run many edits, preserving order. Each item fails or succeeds on its own;
/// randomness is isolated per request through the request seeds.
pub fn batch_edit(models: &EditModels, requests: &[EditRequest]) -> Vec<Result<EditResult>> {
    requests.iter().map(|r| edit(models, r)).collect()
}
