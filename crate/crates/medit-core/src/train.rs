//! Stage trainers and the shared optimizer.
//!
//! Every model trains the same way: per-sample graphs whose gradients
//! accumulate into the parameter store, averaged over the batch, then one
//! AdamW step with global-norm clipping and linear warmup. Trainers write a
//! per-step CSV log and overwrite their checkpoint after every epoch, so a
//! run aborted by a non-finite loss always leaves the last healthy state on
//! disk.
//!
//! The instruction model's joint objective is
//!
//! ```text
//! l_total = l_text + lambda * l_embed
//! ```
//!
//! where `l_text` is teacher-forced next-token cross-entropy and `l_embed`
//! is the cosine distance between the insight vector and the frozen image
//! embedding of the ground-truth edited image. With `lambda = 0` the
//! embedding branch is skipped outright, making the run bit-identical to
//! text-only training rather than merely close to it.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diffusion::autoencoder::Autoencoder;
use crate::diffusion::{add_noise, make_schedule, unet::UNet, Schedule};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::mml::{MmlModel, Vocabulary};
use crate::nn::{Ctx, ParamStore};
use crate::synthdata::corpus::Corpus;
use crate::tensor::rng::{Rng, StreamKind};
use crate::tensor::tape::Graph;
use crate::tensor::Tensor;

/// Cross-attention head count of the shipped decoder configuration (must
/// divide both channel widths of the noise predictor).
pub const UNET_HEADS: usize = 4;

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;
/// Gradient clip and warmup shared by every stage.
const CLIP_NORM: f32 = 1.0;
const WARMUP_STEPS: usize = 100;

/// Scale every accumulated gradient in place (batch averaging).
pub fn scale_grads(store: &mut ParamStore, k: f32) {
    for g in store.grads_mut().values_mut() {
        for v in g.iter_mut() {
            *v *= k;
        }
    }
}

/// Clip the global gradient norm to `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f32) -> Result<f32> {
    let norm = store.grad_global_norm();
    if !norm.is_finite() {
        return Err(Error::numeric(format!("gradient norm {norm}")));
    }
    if norm > max_norm {
        scale_grads(store, max_norm / norm);
    }
    Ok(norm)
}

/// Decoupled-weight-decay Adam with bias correction:
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// p <- p - lr_t * m_hat / (sqrt(v_hat) + eps) - lr_t * wd * p
/// ```
///
/// `lr_t` ramps linearly over the warmup span and stays constant after.
/// Each step consumes and clears the store's accumulated gradients;
/// parameters without a gradient entry are left untouched bit-for-bit.
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    pub warmup: usize,
    step: usize,
    m: std::collections::BTreeMap<String, Vec<f32>>,
    v: std::collections::BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            weight_decay,
            clip_norm: Some(CLIP_NORM),
            warmup: 0,
            step: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup = steps;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f32 {
        let t = self.step + 1;
        if self.warmup > 0 && t < self.warmup {
            self.lr * t as f32 / self.warmup as f32
        } else {
            self.lr
        }
    }

    /// Apply one update from the gradients accumulated in `store`; returns
    /// the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f32> {
        let norm = match self.clip_norm {
            Some(c) => clip_gradients(store, c)?,
            None => {
                let n = store.grad_global_norm();
                if !n.is_finite() {
                    return Err(Error::numeric(format!("gradient norm {n}")));
                }
                n
            }
        };
        let lr_t = self.next_lr();
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let grads = std::mem::take(store.grads_mut());
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(&name)?;
            if p.numel() != g.len() {
                return Err(Error::shape(format!("optimizer state for {name} out of date")));
            }
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -=
                    lr_t * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr_t * self.weight_decay * p.data[i];
            }
        }
        Ok(norm)
    }
}

/// Which branches of the instruction model's objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Both losses, combined as `l_text + lambda * l_embed`.
    Joint,
    /// Instruction loss only (the independent instruction generator).
    TextOnly,
    /// Embedding loss only (the independent insight extractor).
    VisionOnly,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "text-only" => Ok(TrainMode::TextOnly),
            "vision-only" => Ok(TrainMode::VisionOnly),
            other => Err(Error::parameter(format!(
                "mode {other:?}; expected joint, text-only, or vision-only"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::TextOnly => "text-only",
            TrainMode::VisionOnly => "vision-only",
        }
    }

    /// Checkpoint file stem for this variant.
    pub fn stem(&self) -> String {
        format!("mml-{}", self.name())
    }
}

/// What a finished (or aborted-after-N-epochs) training run reports back.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub first_epoch_loss: f32,
    pub last_epoch_loss: f32,
    pub checkpoint: PathBuf,
    pub hash: [u8; 32],
    pub warnings: Vec<String>,
}

struct CsvLog {
    file: fs::File,
}

impl CsvLog {
    fn create(path: &Path, header: &str) -> Result<CsvLog> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(CsvLog { file })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

fn ensure_finite(loss: f32, stage: &str, ckpt: &Path) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "{stage}: non-finite loss {loss}; training aborted, last saved checkpoint kept at {}",
            ckpt.display()
        )))
    }
}

fn epoch_line(stage: &str, epoch: usize, total: usize, loss: f32, started: &Instant) {
    eprintln!(
        "[{stage}] epoch {epoch}/{total}  mean loss {loss:.5}  ({:.1}s)",
        started.elapsed().as_secs_f32()
    );
}

fn improvement_warning(stage: &str, first: f32, last: f32, warnings: &mut Vec<String>) {
    if last > first {
        warnings.push(format!(
            "{stage}: mean loss rose from {first:.5} (first epoch) to {last:.5} (last)"
        ));
    }
}

/// Train the contrastive embedder on (edited image, optimized caption)
/// pairs. Saves `embedder.ckpt` in `out` after every epoch.
pub fn train_embedder(cfg: &RunConfig, corpus: &Corpus, out: &Path) -> Result<TrainSummary> {
    let c = &cfg.embedder;
    if c.epochs == 0 {
        return Err(Error::parameter("embedder: epochs must be positive"));
    }
    let vocab = Vocabulary::core();
    let emb = Embedder::new(c.dim, vocab.len())?;
    let mut store = emb.init_params(c.seed);

    let mut images = Vec::with_capacity(corpus.len());
    let mut captions = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let s = corpus.load(i)?;
        images.push(s.i_gt);
        captions.push(vocab.encode(&s.t_gt.caption())?);
    }

    let ckpt = out.join("embedder.ckpt");
    let mut hash = checkpoint::save(&ckpt, &store)?;
    let mut log = CsvLog::create(&out.join("embedder_log.csv"), "step,loss")?;
    let mut opt = AdamW::new(c.lr, c.weight_decay).with_warmup(WARMUP_STEPS);
    let started = Instant::now();
    let (mut first_epoch, mut last_epoch) = (0.0f32, 0.0f32);
    let mut steps = 0usize;

    for epoch in 0..c.epochs {
        let mut idx: Vec<usize> = (0..images.len()).collect();
        Rng::stream(c.seed, StreamKind::Data, epoch as u64).shuffle(&mut idx);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in idx.chunks(c.batch_size) {
            if batch.len() < 2 {
                continue; // contrastive loss is undefined on singletons
            }
            let imgs: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
            let caps: Vec<Vec<u32>> = batch.iter().map(|&i| captions[i].clone()).collect();
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store);
            let loss = emb.contrastive_loss(&mut ctx, &imgs, &caps)?;
            let bindings = ctx.into_bindings();
            let lv = g.value(loss).item();
            ensure_finite(lv, "embedder", &ckpt)?;
            g.backward(loss)?;
            bindings.absorb(&g, &mut store)?;
            opt.step(&mut store)?;
            Embedder::clamp_logit_scale(&mut store)?;
            steps += 1;
            epoch_loss += lv as f64;
            epoch_batches += 1;
            log.row(&format!("{steps},{lv}"))?;
        }
        let mean = (epoch_loss / epoch_batches.max(1) as f64) as f32;
        if epoch == 0 {
            first_epoch = mean;
        }
        last_epoch = mean;
        hash = checkpoint::save(&ckpt, &store)?;
        epoch_line("embedder", epoch + 1, c.epochs, mean, &started);
    }
    let mut warnings = Vec::new();
    improvement_warning("embedder", first_epoch, last_epoch, &mut warnings);
    Ok(TrainSummary {
        steps,
        epochs: c.epochs,
        first_epoch_loss: first_epoch,
        last_epoch_loss: last_epoch,
        checkpoint: ckpt,
        hash,
        warnings,
    })
}

/// Mean per-pixel reconstruction error over a corpus's edited images.
pub fn autoencoder_heldout_mse(store: &ParamStore, corpus: &Corpus) -> Result<f32> {
    if corpus.len() == 0 {
        return Err(Error::parameter("held-out corpus is empty"));
    }
    let mut total = 0.0f64;
    for i in 0..corpus.len() {
        let s = corpus.load(i)?;
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let loss = Autoencoder::recon_loss(&mut ctx, &s.i_gt)?;
        total += g.value(loss).item() as f64;
    }
    Ok((total / corpus.len() as f64) as f32)
}

/// Train the image autoencoder on both sides of every edit pair. When a
/// held-out corpus is given, the final model's reconstruction error is
/// checked against the configured tolerance (a warning, not a failure).
pub fn train_autoencoder(
    cfg: &RunConfig,
    corpus: &Corpus,
    heldout: Option<&Corpus>,
    out: &Path,
) -> Result<TrainSummary> {
    let c = &cfg.autoencoder;
    if c.epochs == 0 {
        return Err(Error::parameter("autoencoder: epochs must be positive"));
    }
    let mut images = Vec::with_capacity(2 * corpus.len());
    for i in 0..corpus.len() {
        let s = corpus.load(i)?;
        images.push(s.i_src);
        images.push(s.i_gt);
    }
    let mut store = Autoencoder::init_params(c.seed);
    let ckpt = out.join("autoencoder.ckpt");
    let mut hash = checkpoint::save(&ckpt, &store)?;
    let mut log = CsvLog::create(&out.join("autoencoder_log.csv"), "step,loss")?;
    let mut opt = AdamW::new(c.lr, c.weight_decay).with_warmup(WARMUP_STEPS);
    let started = Instant::now();
    let (mut first_epoch, mut last_epoch) = (0.0f32, 0.0f32);
    let mut steps = 0usize;

    for epoch in 0..c.epochs {
        let mut idx: Vec<usize> = (0..images.len()).collect();
        Rng::stream(c.seed, StreamKind::Data, epoch as u64).shuffle(&mut idx);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in idx.chunks(c.batch_size) {
            let mut batch_loss = 0.0f32;
            for &i in batch {
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &store);
                let loss = Autoencoder::recon_loss(&mut ctx, &images[i])?;
                let bindings = ctx.into_bindings();
                let lv = g.value(loss).item();
                ensure_finite(lv, "autoencoder", &ckpt)?;
                batch_loss += lv;
                g.backward(loss)?;
                bindings.absorb(&g, &mut store)?;
            }
            scale_grads(&mut store, 1.0 / batch.len() as f32);
            opt.step(&mut store)?;
            steps += 1;
            let mean = batch_loss / batch.len() as f32;
            epoch_loss += mean as f64;
            epoch_batches += 1;
            log.row(&format!("{steps},{mean}"))?;
        }
        let mean = (epoch_loss / epoch_batches.max(1) as f64) as f32;
        if epoch == 0 {
            first_epoch = mean;
        }
        last_epoch = mean;
        hash = checkpoint::save(&ckpt, &store)?;
        epoch_line("autoencoder", epoch + 1, c.epochs, mean, &started);
    }

    let mut warnings = Vec::new();
    improvement_warning("autoencoder", first_epoch, last_epoch, &mut warnings);
    if let Some(test) = heldout {
        let mse = autoencoder_heldout_mse(&store, test)?;
        eprintln!("[autoencoder] held-out reconstruction mse {mse:.6}");
        if mse > c.recon_tolerance {
            warnings.push(format!(
                "autoencoder: held-out reconstruction mse {mse:.6} exceeds tolerance {}",
                c.recon_tolerance
            ));
        }
    }
    Ok(TrainSummary {
        steps,
        epochs: c.epochs,
        first_epoch_loss: first_epoch,
        last_epoch_loss: last_epoch,
        checkpoint: ckpt,
        hash,
        warnings,
    })
}

/// Key under which dependent checkpoints record the embedder they were
/// trained against.
pub const EMBEDDER_HASH_KEY: &str = "meta.embedder_hash";

/// Train the instruction model. The embedding-loss target for each sample is
/// the frozen embedder's embedding of the ground-truth edited image; the
/// checkpoint records that embedder's hash so later stages can refuse
/// mismatched pairings.
pub fn train_mml(
    cfg: &RunConfig,
    corpus: &Corpus,
    embedder_ckpt: &Path,
    mode: TrainMode,
    out: &Path,
) -> Result<TrainSummary> {
    let c = &cfg.mml;
    if c.epochs == 0 {
        return Err(Error::parameter("mml: epochs must be positive"));
    }
    let vocab = Vocabulary::core();
    let model = MmlModel::from_config(c, &vocab)?;
    let (emb_store, emb_hash) = checkpoint::load(embedder_ckpt)?;
    let emb = Embedder::new(c.embed_dim, vocab.len())?;

    // One frozen pass up front: prompts, teacher-forced completions, and
    // embedding-loss goals never change during training.
    let use_embed = match mode {
        TrainMode::Joint => c.lambda > 0.0,
        TrainMode::TextOnly => false,
        TrainMode::VisionOnly => true,
    };
    let use_text = mode != TrainMode::VisionOnly;
    struct Sample {
        prompt: crate::mml::Prompt,
        completion: Vec<u32>,
        goal: Option<Tensor>,
    }
    let mut samples = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let s = corpus.load(i)?;
        let raw = vocab.encode(&s.t_raw)?;
        let mut completion = s.t_gt.to_token_ids(&vocab)?;
        completion.push(vocab.eos());
        let goal =
            if use_embed { Some(emb.embed_image(&emb_store, &s.i_gt)?) } else { None };
        samples.push(Sample { prompt: model.encode_prompt(&s.i_src, &raw)?, completion, goal });
    }

    let mut store = model.init_params(c.seed);
    checkpoint::embed_dependency_hash(&mut store, EMBEDDER_HASH_KEY, &emb_hash);
    let stage = mode.stem();
    let ckpt = out.join(format!("{stage}.ckpt"));
    let mut hash = checkpoint::save(&ckpt, &store)?;
    let mut log = CsvLog::create(&out.join(format!("{stage}_log.csv")), "step,l_text,l_embed,l_total")?;
    let mut opt = AdamW::new(c.lr, c.weight_decay).with_warmup(WARMUP_STEPS);
    let started = Instant::now();
    let (mut first_epoch, mut last_epoch) = (0.0f32, 0.0f32);
    let mut steps = 0usize;

    for epoch in 0..c.epochs {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        Rng::stream(c.seed, StreamKind::Data, epoch as u64).shuffle(&mut idx);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in idx.chunks(c.batch_size) {
            let (mut b_text, mut b_embed, mut b_total) = (0.0f32, 0.0f32, 0.0f32);
            for &i in batch {
                let sample = &samples[i];
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &store);
                let fwd = model.forward_full(&mut ctx, &sample.prompt, if use_text {
                    &sample.completion
                } else {
                    &[]
                })?;
                let mut text_v = 0.0f32;
                let mut embed_v = 0.0f32;
                let loss = match (use_text, use_embed) {
                    (true, true) => {
                        let lt = model.text_loss(&mut ctx, &fwd, &sample.completion)?;
                        let le = model.insight_loss(
                            &mut ctx,
                            &fwd,
                            sample.goal.as_ref().expect("goal precomputed"),
                        )?;
                        text_v = ctx.g.value(lt).item();
                        embed_v = ctx.g.value(le).item();
                        let scaled = ctx.g.scale(le, c.lambda);
                        ctx.g.add(lt, scaled)?
                    }
                    (true, false) => {
                        let lt = model.text_loss(&mut ctx, &fwd, &sample.completion)?;
                        text_v = ctx.g.value(lt).item();
                        lt
                    }
                    (false, true) => {
                        let le = model.insight_loss(
                            &mut ctx,
                            &fwd,
                            sample.goal.as_ref().expect("goal precomputed"),
                        )?;
                        embed_v = ctx.g.value(le).item();
                        le
                    }
                    (false, false) => unreachable!("at least one branch is always active"),
                };
                let bindings = ctx.into_bindings();
                let lv = g.value(loss).item();
                ensure_finite(lv, "mml", &ckpt)?;
                b_text += text_v;
                b_embed += embed_v;
                b_total += lv;
                g.backward(loss)?;
                bindings.absorb(&g, &mut store)?;
            }
            scale_grads(&mut store, 1.0 / batch.len() as f32);
            opt.step(&mut store)?;
            steps += 1;
            let n = batch.len() as f32;
            let mean = b_total / n;
            epoch_loss += mean as f64;
            epoch_batches += 1;
            log.row(&format!("{steps},{},{},{mean}", b_text / n, b_embed / n))?;
        }
        let mean = (epoch_loss / epoch_batches.max(1) as f64) as f32;
        if epoch == 0 {
            first_epoch = mean;
        }
        last_epoch = mean;
        hash = checkpoint::save(&ckpt, &store)?;
        epoch_line(&stage, epoch + 1, c.epochs, mean, &started);
    }
    let mut warnings = Vec::new();
    improvement_warning(&stage, first_epoch, last_epoch, &mut warnings);
    Ok(TrainSummary {
        steps,
        epochs: c.epochs,
        first_epoch_loss: first_epoch,
        last_epoch_loss: last_epoch,
        checkpoint: ckpt,
        hash,
        warnings,
    })
}

/// Where the insight conditioning rows for decoder training come from.
pub enum InsightTeacher<'a> {
    /// A trained instruction model: its insight vector on (source image,
    /// rough request), the pairing the edit pipeline reproduces at use time.
    Mml(&'a Path),
    /// Bootstrap oracle: the frozen embedder's embedding of the ground-truth
    /// edited image. Useful before any instruction model exists and as a
    /// diagnostic upper bound on conditioning quality.
    ImageEmbedding,
}

/// Conditioning provenance and calibration embedded in a decoder checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionMeta {
    pub embedder_hash: [u8; 32],
    pub autoencoder_hash: [u8; 32],
    /// None when the insight teacher was the image-embedding oracle.
    pub mml_hash: Option<[u8; 32]>,
    /// Latents are divided by this before diffusion and multiplied back
    /// after; the value is the standard deviation of the training latents.
    pub latent_scale: f32,
    pub timesteps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
}

const AE_HASH_KEY: &str = "meta.autoencoder_hash";
const MML_HASH_KEY: &str = "meta.mml_hash";
const SCALE_KEY: &str = "meta.latent_scale";
const SCHEDULE_KEY: &str = "meta.schedule";
const SOURCE_KEY: &str = "meta.insight_source";

impl DiffusionMeta {
    pub fn write(&self, store: &mut ParamStore) {
        checkpoint::embed_dependency_hash(store, EMBEDDER_HASH_KEY, &self.embedder_hash);
        checkpoint::embed_dependency_hash(store, AE_HASH_KEY, &self.autoencoder_hash);
        checkpoint::embed_dependency_hash(store, MML_HASH_KEY, &self.mml_hash.unwrap_or([0; 32]));
        store.insert(SOURCE_KEY, Tensor::scalar(if self.mml_hash.is_some() { 1.0 } else { 0.0 }));
        store.insert(SCALE_KEY, Tensor::scalar(self.latent_scale));
        store.insert(
            SCHEDULE_KEY,
            Tensor::new(&[3], vec![self.timesteps as f32, self.beta_start, self.beta_end])
                .expect("fixed shape"),
        );
    }

    pub fn read(store: &ParamStore) -> Result<DiffusionMeta> {
        let schedule = store.get(SCHEDULE_KEY)?;
        if schedule.shape != [3] {
            return Err(Error::integrity("decoder checkpoint: malformed schedule record"));
        }
        let from_mml = store.get(SOURCE_KEY)?.item() != 0.0;
        let scale = store.get(SCALE_KEY)?.item();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::integrity(format!(
                "decoder checkpoint: latent scale {scale}"
            )));
        }
        Ok(DiffusionMeta {
            embedder_hash: checkpoint::read_dependency_hash(store, EMBEDDER_HASH_KEY)?,
            autoencoder_hash: checkpoint::read_dependency_hash(store, AE_HASH_KEY)?,
            mml_hash: if from_mml {
                Some(checkpoint::read_dependency_hash(store, MML_HASH_KEY)?)
            } else {
                None
            },
            latent_scale: scale,
            timesteps: schedule.data[0] as usize,
            beta_start: schedule.data[1],
            beta_end: schedule.data[2],
        })
    }
}

/// Population standard deviation of every element across a set of latents.
fn latent_std(latents: &[Tensor]) -> Result<f32> {
    let mut n = 0usize;
    let (mut sum, mut sq) = (0.0f64, 0.0f64);
    for z in latents {
        for &v in &z.data {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
        n += z.numel();
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let std = var.max(0.0).sqrt() as f32;
    if !(std > 1e-6) {
        return Err(Error::numeric(format!("degenerate latent distribution (std {std})")));
    }
    Ok(std)
}

/// Train the latent noise predictor. Text conditioning rows are the frozen
/// embedder's per-token features of the ground-truth caption; insight
/// conditioning comes from `teacher`. All conditioning and all latents are
/// precomputed once (every teacher is frozen), so epochs only re-randomize
/// timesteps and noise.
pub fn train_diffusion(
    cfg: &RunConfig,
    corpus: &Corpus,
    embedder_ckpt: &Path,
    autoencoder_ckpt: &Path,
    teacher: InsightTeacher,
    out: &Path,
) -> Result<TrainSummary> {
    let c = &cfg.diffusion;
    if c.epochs == 0 {
        return Err(Error::parameter("diffusion: epochs must be positive"));
    }
    let sched = make_schedule(c.timesteps, c.beta_start, c.beta_end)?;
    let vocab = Vocabulary::core();
    let (emb_store, emb_hash) = checkpoint::load(embedder_ckpt)?;
    let emb = Embedder::new(cfg.embedder.dim, vocab.len())?;
    let (ae_store, ae_hash) = checkpoint::load(autoencoder_ckpt)?;

    let mml = match teacher {
        InsightTeacher::Mml(path) => {
            let (mml_store, mml_hash) = checkpoint::load(path)?;
            let recorded = checkpoint::read_dependency_hash(&mml_store, EMBEDDER_HASH_KEY)?;
            if recorded != emb_hash {
                return Err(Error::integrity(format!(
                    "instruction checkpoint {} was trained against embedder {}, not {}",
                    path.display(),
                    checkpoint::hash_hex(&recorded),
                    checkpoint::hash_hex(&emb_hash)
                )));
            }
            Some((MmlModel::from_config(&cfg.mml, &vocab)?, mml_store, mml_hash))
        }
        InsightTeacher::ImageEmbedding => None,
    };

    // Frozen precompute: latents for both sides of each pair, caption
    // feature rows, and one insight row per sample.
    struct Sample {
        z0: Tensor,
        src: Tensor,
        text: Tensor,
        insight: Tensor,
    }
    let mut raw = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let s = corpus.load(i)?;
        let z0 = Autoencoder::encode_image(&ae_store, &s.i_gt)?;
        let src = Autoencoder::encode_image(&ae_store, &s.i_src)?;
        let text = emb.text_features(&emb_store, &vocab.encode(&s.t_gt.caption())?)?;
        let insight = match &mml {
            Some((model, mml_store, _)) => {
                let prompt = model.encode_prompt(&s.i_src, &vocab.encode(&s.t_raw)?)?;
                model.insight_vector(mml_store, &prompt)?
            }
            None => emb.embed_image(&emb_store, &s.i_gt)?,
        };
        raw.push((z0, src, text, insight));
    }
    let z0s: Vec<Tensor> = raw.iter().map(|(z0, _, _, _)| z0.clone()).collect();
    let scale = latent_std(&z0s)?;
    drop(z0s);
    let dim = cfg.embedder.dim;
    let samples: Vec<Sample> = raw
        .into_iter()
        .map(|(z0, src, text, insight)| {
            Ok(Sample {
                z0: z0.scale(1.0 / scale),
                src: src.scale(1.0 / scale),
                text,
                insight: insight.reshaped(&[1, dim])?,
            })
        })
        .collect::<Result<_>>()?;

    let unet = UNet::new(dim, UNET_HEADS)?;
    let mut store = unet.init_params(c.seed);
    let meta = DiffusionMeta {
        embedder_hash: emb_hash,
        autoencoder_hash: ae_hash,
        mml_hash: mml.as_ref().map(|(_, _, h)| *h),
        latent_scale: scale,
        timesteps: c.timesteps,
        beta_start: c.beta_start,
        beta_end: c.beta_end,
    };
    meta.write(&mut store);

    let ckpt = out.join("diffusion.ckpt");
    let mut hash = checkpoint::save(&ckpt, &store)?;
    let mut log = CsvLog::create(&out.join("diffusion_log.csv"), "step,loss")?;
    let mut opt = AdamW::new(c.lr, c.weight_decay).with_warmup(WARMUP_STEPS);
    let started = Instant::now();
    let (mut first_epoch, mut last_epoch) = (0.0f32, 0.0f32);
    let mut steps = 0usize;

    for epoch in 0..c.epochs {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        Rng::stream(c.seed, StreamKind::Data, epoch as u64).shuffle(&mut idx);
        let mut noise = Rng::stream(c.seed, StreamKind::Noise, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for batch in idx.chunks(c.batch_size) {
            let mut batch_loss = 0.0f32;
            for &i in batch {
                let s = &samples[i];
                let t = noise.below(sched.len()) + 1;
                let eps = Tensor::randn(&s.z0.shape, &mut noise);
                let z_t = add_noise(&s.z0, &eps, t, &sched)?;
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &store);
                let eps_hat = unet.forward(&mut ctx, &z_t, &s.src, t, &s.text, &s.insight)?;
                let target = ctx.g.constant(eps);
                let loss = ctx.g.mse(eps_hat, target)?;
                let bindings = ctx.into_bindings();
                let lv = g.value(loss).item();
                ensure_finite(lv, "diffusion", &ckpt)?;
                batch_loss += lv;
                g.backward(loss)?;
                bindings.absorb(&g, &mut store)?;
            }
            scale_grads(&mut store, 1.0 / batch.len() as f32);
            opt.step(&mut store)?;
            steps += 1;
            let mean = batch_loss / batch.len() as f32;
            epoch_loss += mean as f64;
            epoch_batches += 1;
            log.row(&format!("{steps},{mean}"))?;
        }
        let mean = (epoch_loss / epoch_batches.max(1) as f64) as f32;
        if epoch == 0 {
            first_epoch = mean;
        }
        last_epoch = mean;
        hash = checkpoint::save(&ckpt, &store)?;
        epoch_line("diffusion", epoch + 1, c.epochs, mean, &started);
    }
    let mut warnings = Vec::new();
    improvement_warning("diffusion", first_epoch, last_epoch, &mut warnings);
    Ok(TrainSummary {
        steps,
        epochs: c.epochs,
        first_epoch_loss: first_epoch,
        last_epoch_loss: last_epoch,
        checkpoint: ckpt,
        hash,
        warnings,
    })
}

/// Rebuild the noise schedule a decoder checkpoint was trained with.
pub fn schedule_from_meta(meta: &DiffusionMeta) -> Result<Schedule> {
    make_schedule(meta.timesteps, meta.beta_start, meta.beta_end)
}

/// Format a summary for command-line reporting.
pub fn summary_lines(stage: &str, s: &TrainSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{stage}: {} steps over {} epochs, mean loss {:.5} -> {:.5}",
        s.steps, s.epochs, s.first_epoch_loss, s.last_epoch_loss
    );
    let _ = writeln!(
        out,
        "  checkpoint {} ({})",
        s.checkpoint.display(),
        checkpoint::hash_hex(&s.hash)
    );
    for w in &s.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::corpus::{read_split, write_corpus};

    fn store_with(params: &[(&str, &[f32])]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, data) in params {
            s.insert(name, Tensor::new(&[data.len()], data.to_vec()).unwrap());
        }
        s
    }

    #[test]
    fn zero_gradients_and_zero_decay_leave_parameters_untouched() {
        let mut store = store_with(&[("w", &[0.5, -0.25, 3.0])]);
        let before = store.get("w").unwrap().data.clone();
        let mut opt = AdamW::new(1e-3, 0.0);
        // No gradient entries at all: nothing moves.
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data, before);
        // Explicit zero gradients: the update is exactly zero too.
        store.accumulate_grad("w", &[0.0, 0.0, 0.0]).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data, before);
    }

    #[test]
    fn first_step_matches_the_signed_unit_update() {
        // With fresh moments, bias correction makes the first step exactly
        // lr * g / (|g| + eps) per element.
        let mut store = store_with(&[("w", &[1.0, 2.0, -3.0])]);
        let g = [0.3f32, -0.01, 0.0002];
        store.accumulate_grad("w", &g).unwrap();
        let lr = 1e-3;
        let mut opt = AdamW::new(lr, 0.0);
        opt.step(&mut store).unwrap();
        let after = &store.get("w").unwrap().data;
        for i in 0..3 {
            let want = [1.0, 2.0, -3.0][i] - lr * g[i] / (g[i].abs() + ADAM_EPS);
            assert!((after[i] - want).abs() < 1e-7, "element {i}: {} vs {want}", after[i]);
        }
    }

    #[test]
    fn warmup_scales_early_steps_linearly() {
        let mut store = store_with(&[("w", &[1.0])]);
        store.accumulate_grad("w", &[0.5]).unwrap();
        let lr = 4e-3;
        let mut opt = AdamW::new(lr, 0.0).with_warmup(4);
        assert!((opt.next_lr() - lr / 4.0).abs() < 1e-9);
        opt.step(&mut store).unwrap();
        let moved = 1.0 - store.get("w").unwrap().data[0];
        let want = (lr / 4.0) * 0.5 / (0.5 + ADAM_EPS);
        assert!((moved - want).abs() < 1e-7, "{moved} vs {want}");
        // Past the warmup span the rate is constant.
        for _ in 0..4 {
            store.accumulate_grad("w", &[0.5]).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert_eq!(opt.next_lr(), lr);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_gradient_path() {
        // Zero gradients with nonzero decay shrink the parameter by exactly
        // (1 - lr * wd) per step; no gradient-dependent term sneaks in.
        let mut store = store_with(&[("w", &[2.0])]);
        let (lr, wd) = (1e-2, 0.1);
        let mut opt = AdamW::new(lr, wd);
        let mut want = 2.0f32;
        for _ in 0..3 {
            store.accumulate_grad("w", &[0.0]).unwrap();
            opt.step(&mut store).unwrap();
            want -= lr * wd * want;
            let got = store.get("w").unwrap().data[0];
            assert_eq!(got, want, "pure multiplicative shrink, bit for bit");
        }
    }

    #[test]
    fn clipping_rescales_to_the_cap_and_reports_the_raw_norm() {
        let mut store = store_with(&[("a", &[3.0, 0.0]), ("b", &[0.0, 4.0])]);
        store.accumulate_grad("a", &[3.0, 0.0]).unwrap();
        store.accumulate_grad("b", &[0.0, 4.0]).unwrap();
        let norm = clip_gradients(&mut store, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-6);
        assert!((store.grad_global_norm() - 1.0).abs() < 1e-6);
        assert!((store.grad("a").unwrap()[0] - 0.6).abs() < 1e-6, "direction preserved");
    }

    #[test]
    fn adamw_converges_on_a_separable_quadratic() {
        // f(x) = sum_i (x_i - c_i)^2 with offsets inside the reachable span;
        // 100 constant-rate steps must land every coordinate within 1e-3.
        let targets = [0.013f32, -0.02, 0.007, -0.004];
        let mut store = store_with(&[("x", &[0.0, 0.0, 0.0, 0.0])]);
        let mut opt = AdamW::new(5e-4, 0.0);
        for _ in 0..100 {
            let x = store.get("x").unwrap().data.clone();
            let g: Vec<f32> = x.iter().zip(&targets).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            store.accumulate_grad("x", &g).unwrap();
            opt.step(&mut store).unwrap();
        }
        for (i, (xi, ci)) in store.get("x").unwrap().data.iter().zip(&targets).enumerate() {
            assert!((xi - ci).abs() < 1e-3, "coordinate {i}: {xi} vs {ci}");
        }
    }

    /// Shared tiny setup: a 6/2 corpus and a config scaled for test speed.
    fn tiny_setup(dir: &Path) -> (RunConfig, Corpus, Corpus) {
        let root = dir.join("data");
        write_corpus(&root, 7001, 6, 2).unwrap();
        let mut cfg = RunConfig::default();
        cfg.embedder.dim = 16;
        cfg.embedder.epochs = 1;
        cfg.embedder.batch_size = 3;
        cfg.mml.embed_dim = 16;
        cfg.mml.layers = 2;
        cfg.mml.d_model = 32;
        cfg.mml.heads = 2;
        cfg.mml.patch = 8;
        cfg.mml.tap_layer = Some(1);
        cfg.mml.epochs = 1;
        cfg.mml.batch_size = 3;
        cfg.autoencoder.epochs = 1;
        cfg.autoencoder.batch_size = 4;
        cfg.diffusion.timesteps = 8;
        cfg.diffusion.epochs = 1;
        cfg.diffusion.batch_size = 3;
        cfg.validate().unwrap();
        let train = read_split(&root.join("train")).unwrap();
        let test = read_split(&root.join("test")).unwrap();
        (cfg, train, test)
    }

    #[test]
    fn embedder_training_writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, train, _) = tiny_setup(dir.path());
        let out = dir.path().join("runs");
        let summary = train_embedder(&cfg, &train, &out).unwrap();
        assert_eq!(summary.steps, 2, "6 samples in batches of 3");
        assert!(summary.last_epoch_loss.is_finite());
        let (store, hash) = checkpoint::load(&summary.checkpoint).unwrap();
        assert_eq!(hash, summary.hash);
        assert!(store.contains("emb.logit_scale"));
        let log = fs::read_to_string(out.join("embedder_log.csv")).unwrap();
        assert!(log.starts_with("step,loss\n"));
        assert_eq!(log.lines().count(), 3);
    }

    #[test]
    fn autoencoder_training_flags_missed_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, train, test) = tiny_setup(dir.path());
        // One epoch on six samples cannot reach an absurdly tight target.
        cfg.autoencoder.recon_tolerance = 1e-9;
        let out = dir.path().join("runs");
        let summary = train_autoencoder(&cfg, &train, Some(&test), &out).unwrap();
        assert!(summary.warnings.iter().any(|w| w.contains("tolerance")), "{:?}", summary.warnings);
        let mse = autoencoder_heldout_mse(&checkpoint::load(&summary.checkpoint).unwrap().0, &test)
            .unwrap();
        assert!(mse.is_finite() && mse > 0.0);
    }

    #[test]
    fn zero_lambda_joint_training_is_bit_identical_to_text_only() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, train, _) = tiny_setup(dir.path());
        let out = dir.path().join("runs");
        let emb = train_embedder(&cfg, &train, &out).unwrap();

        cfg.mml.lambda = 0.0;
        let joint = train_mml(&cfg, &train, &emb.checkpoint, TrainMode::Joint, &out).unwrap();
        let text = train_mml(&cfg, &train, &emb.checkpoint, TrainMode::TextOnly, &out).unwrap();
        // Same seeds, same shuffles, and a skipped (not zero-scaled)
        // embedding branch: the parameter bytes must come out identical.
        let (js, _) = checkpoint::load(&joint.checkpoint).unwrap();
        let (ts, _) = checkpoint::load(&text.checkpoint).unwrap();
        for (name, t) in js.iter() {
            assert_eq!(t.data, ts.get(name).unwrap().data, "{name} diverged");
        }
        let jlog = fs::read_to_string(out.join("mml-joint_log.csv")).unwrap();
        let tlog = fs::read_to_string(out.join("mml-text-only_log.csv")).unwrap();
        assert_eq!(jlog, tlog);
    }

    #[test]
    fn mml_checkpoint_records_its_embedder() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, train, _) = tiny_setup(dir.path());
        let out = dir.path().join("runs");
        let emb = train_embedder(&cfg, &train, &out).unwrap();
        let s = train_mml(&cfg, &train, &emb.checkpoint, TrainMode::VisionOnly, &out).unwrap();
        let (store, _) = checkpoint::load(&s.checkpoint).unwrap();
        assert_eq!(
            checkpoint::read_dependency_hash(&store, EMBEDDER_HASH_KEY).unwrap(),
            emb.hash
        );
        let log = fs::read_to_string(out.join("mml-vision-only_log.csv")).unwrap();
        let first = log.lines().nth(1).unwrap();
        let cols: Vec<&str> = first.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[1], "0", "vision-only logs no text loss");
    }

    #[test]
    fn diffusion_training_embeds_provenance_and_calibration() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, train, _) = tiny_setup(dir.path());
        let out = dir.path().join("runs");
        let emb = train_embedder(&cfg, &train, &out).unwrap();
        let ae = train_autoencoder(&cfg, &train, None, &out).unwrap();

        // Oracle teacher first (no instruction model yet).
        let s = train_diffusion(
            &cfg,
            &train,
            &emb.checkpoint,
            &ae.checkpoint,
            InsightTeacher::ImageEmbedding,
            &out,
        )
        .unwrap();
        let (store, _) = checkpoint::load(&s.checkpoint).unwrap();
        let meta = DiffusionMeta::read(&store).unwrap();
        assert_eq!(meta.embedder_hash, emb.hash);
        assert_eq!(meta.autoencoder_hash, ae.hash);
        assert_eq!(meta.mml_hash, None);
        assert!(meta.latent_scale > 0.0);
        assert_eq!(meta.timesteps, cfg.diffusion.timesteps);
        assert_eq!(schedule_from_meta(&meta).unwrap().len(), cfg.diffusion.timesteps);

        // Instruction-model teacher records the chain of hashes.
        let mml = train_mml(&cfg, &train, &emb.checkpoint, TrainMode::Joint, &out).unwrap();
        let s2 = train_diffusion(
            &cfg,
            &train,
            &emb.checkpoint,
            &ae.checkpoint,
            InsightTeacher::Mml(&mml.checkpoint),
            &out,
        )
        .unwrap();
        let (store2, _) = checkpoint::load(&s2.checkpoint).unwrap();
        let meta2 = DiffusionMeta::read(&store2).unwrap();
        assert_eq!(meta2.mml_hash, Some(mml.hash));
    }

    #[test]
    fn diffusion_refuses_a_mismatched_instruction_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, train, _) = tiny_setup(dir.path());
        let out = dir.path().join("runs");
        let emb_a = train_embedder(&cfg, &train, &out.join("a")).unwrap();
        cfg.embedder.seed += 1;
        let emb_b = train_embedder(&cfg, &train, &out.join("b")).unwrap();
        let ae = train_autoencoder(&cfg, &train, None, &out).unwrap();
        let mml = train_mml(&cfg, &train, &emb_a.checkpoint, TrainMode::Joint, &out).unwrap();
        let err = train_diffusion(
            &cfg,
            &train,
            &emb_b.checkpoint, // different embedder than the mml was trained on
            &ae.checkpoint,
            InsightTeacher::Mml(&mml.checkpoint),
            &out,
        )
        .unwrap_err();
        assert!(err.to_string().contains("trained against embedder"), "{err}");
    }
}
