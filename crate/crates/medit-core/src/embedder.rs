//! Joint image/text embedding model trained with a symmetric contrastive
//! loss, plus the convolutional activation maps reused as the perceptual
//! distance backbone.
//!
//! Images (32x32 RGB in [0,1]) pass through three stride-2 conv+GELU blocks
//! (3 -> 16 -> 32 -> 64 channels, spatial 32 -> 16 -> 8 -> 4) and a linear
//! projection; token sequences pass through a learned embedding plus
//! positions, two pre-norm transformer layers, mean pooling, and a linear
//! projection. Both land in the same `dim`-dimensional space. Training
//! maximizes agreement of matched (image, caption) pairs against the other
//! pairs in the batch via cross-entropy over cosine-similarity logits in both
//! directions, with a single learnable temperature (stored as a plain scale
//! factor, clamped to [1, 100] between optimizer steps).
//!
//! The same graph builders serve training and inference: inference mounts the
//! parameters frozen, so every number the evaluator sees comes from exactly
//! the code the gradients flowed through.

use crate::error::{Error, Result};
use crate::nn::{
    self, init_conv, init_layer_norm, init_linear, init_mlp, init_self_attention, init_tensor,
    Ctx, ParamStore, INIT_STD,
};
use crate::tensor::rng::{Rng, StreamKind};
use crate::tensor::tape::{Graph, NodeId};
use crate::tensor::Tensor;

/// Side length of every input image.
pub const IMAGE_SIDE: usize = 32;
/// Longest caption (in tokens) the text tower accepts.
pub const MAX_TEXT_LEN: usize = 64;
/// Initial similarity scale (1 / 0.07, the usual contrastive temperature).
pub const LOGIT_SCALE_INIT: f32 = 1.0 / 0.07;
/// The scale is clamped into this range after every optimizer step so the
/// softmax can neither collapse to uniform nor saturate.
pub const LOGIT_SCALE_MIN: f32 = 1.0;
pub const LOGIT_SCALE_MAX: f32 = 100.0;
/// Norm floor used when projecting embeddings onto the unit sphere.
const NORM_EPS: f32 = 1e-6;

/// Channel widths after each conv block, in order.
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];
/// Spatial side after each conv block, in order.
pub const FEATURE_SIDES: [usize; 3] = [16, 8, 4];

const TEXT_LAYERS: usize = 2;
const TEXT_HEADS: usize = 2;

/// Shape/vocabulary contract for one embedder instance. `dim` is the shared
/// embedding width; `vocab` bounds the token ids the text tower accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedder {
    pub dim: usize,
    pub vocab: usize,
}

/// Graph handles produced by the image tower: the three post-GELU activation
/// maps (used by the perceptual metric) and the projected embedding [1, dim].
pub struct ImageTower {
    pub maps: [NodeId; 3],
    pub embedding: NodeId,
}

impl Embedder {
    pub fn new(dim: usize, vocab: usize) -> Result<Self> {
        if dim == 0 || vocab == 0 {
            return Err(Error::parameter("embedder: dim and vocab must be positive"));
        }
        Ok(Self { dim, vocab })
    }

    /// Fresh parameters under the `emb.` prefix.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = Rng::stream(seed, StreamKind::Init, 0);
        let mut s = ParamStore::new();
        let chans = FEATURE_CHANNELS;
        init_conv(&mut s, "emb.img.conv1", 3, chans[0], 3, &mut rng);
        init_conv(&mut s, "emb.img.conv2", chans[0], chans[1], 3, &mut rng);
        init_conv(&mut s, "emb.img.conv3", chans[1], chans[2], 3, &mut rng);
        let flat = chans[2] * FEATURE_SIDES[2] * FEATURE_SIDES[2];
        init_linear(&mut s, "emb.img.proj", flat, self.dim, &mut rng);

        init_tensor(&mut s, "emb.txt.tok", &[self.vocab, self.dim], INIT_STD, &mut rng);
        init_tensor(&mut s, "emb.txt.pos", &[MAX_TEXT_LEN, self.dim], INIT_STD, &mut rng);
        for l in 0..TEXT_LAYERS {
            let p = format!("emb.txt.l{l}");
            init_layer_norm(&mut s, &format!("{p}.ln1"), self.dim);
            init_self_attention(&mut s, &format!("{p}.attn"), self.dim, &mut rng);
            init_layer_norm(&mut s, &format!("{p}.ln2"), self.dim);
            init_mlp(&mut s, &format!("{p}.mlp"), self.dim, 2 * self.dim, &mut rng);
        }
        init_layer_norm(&mut s, "emb.txt.ln_f", self.dim);
        init_linear(&mut s, "emb.txt.proj", self.dim, self.dim, &mut rng);

        s.insert("emb.logit_scale", Tensor::full(&[1], LOGIT_SCALE_INIT));
        s
    }

    /// Clamp the similarity scale into its legal range; call after every
    /// optimizer step (the update itself is unconstrained).
    pub fn clamp_logit_scale(store: &mut ParamStore) -> Result<()> {
        let t = store.get_mut("emb.logit_scale")?;
        t.data[0] = t.data[0].clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX);
        Ok(())
    }

    /// Image tower on one [3, 32, 32] image already mounted at `image`.
    pub fn image_tower(&self, ctx: &mut Ctx, image: NodeId) -> Result<ImageTower> {
        let shape = ctx.g.shape(image).to_vec();
        if shape != [3, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::shape(format!(
                "image tower expects [3, {IMAGE_SIDE}, {IMAGE_SIDE}], got {shape:?}"
            )));
        }
        let mut x = image;
        let mut maps = [NodeId::default(); 3];
        for (i, name) in ["conv1", "conv2", "conv3"].iter().enumerate() {
            let y = nn::conv2d(ctx, &format!("emb.img.{name}"), x, 2, 1)?;
            x = ctx.g.gelu(y);
            maps[i] = x;
        }
        let flat = FEATURE_CHANNELS[2] * FEATURE_SIDES[2] * FEATURE_SIDES[2];
        let row = ctx.g.reshape(x, &[1, flat])?;
        let embedding = nn::linear(ctx, "emb.img.proj", row)?;
        Ok(ImageTower { maps, embedding })
    }

    /// Text tower on one token sequence; returns the per-token feature rows
    /// after the final layer norm ([len, dim], what cross-attention
    /// conditioning consumes) and the pooled embedding [1, dim].
    pub fn text_tower_rows(&self, ctx: &mut Ctx, tokens: &[u32]) -> Result<(NodeId, NodeId)> {
        if tokens.is_empty() {
            return Err(Error::contract("text tower: empty token sequence"));
        }
        if tokens.len() > MAX_TEXT_LEN {
            return Err(Error::contract(format!(
                "text tower: {} tokens exceeds limit {MAX_TEXT_LEN}",
                tokens.len()
            )));
        }
        let len = tokens.len();
        let tok_table = ctx.p("emb.txt.tok")?;
        let mut x = ctx.g.embedding(tok_table, tokens)?;
        let pos_table = ctx.p("emb.txt.pos")?;
        let pos = ctx.g.slice_rows(pos_table, 0, len)?;
        x = ctx.g.add(x, pos)?;
        for l in 0..TEXT_LAYERS {
            let p = format!("emb.txt.l{l}");
            let n1 = nn::layer_norm(ctx, &format!("{p}.ln1"), x)?;
            let a = nn::self_attention(ctx, &format!("{p}.attn"), n1, TEXT_HEADS, None)?;
            x = ctx.g.add(x, a)?;
            let n2 = nn::layer_norm(ctx, &format!("{p}.ln2"), x)?;
            let m = nn::mlp(ctx, &format!("{p}.mlp"), n2)?;
            x = ctx.g.add(x, m)?;
        }
        let nf = nn::layer_norm(ctx, "emb.txt.ln_f", x)?;
        let pooled = ctx.g.mean_axis(nf, 0)?;
        let row = ctx.g.reshape(pooled, &[1, self.dim])?;
        let emb = nn::linear(ctx, "emb.txt.proj", row)?;
        Ok((nf, emb))
    }

    /// Text tower on one token sequence; returns the embedding [1, dim].
    pub fn text_tower(&self, ctx: &mut Ctx, tokens: &[u32]) -> Result<NodeId> {
        Ok(self.text_tower_rows(ctx, tokens)?.1)
    }

    /// Symmetric contrastive loss over a batch of matched (image, caption)
    /// pairs: cross-entropy against the diagonal on scaled cosine logits,
    /// averaged over the image->text and text->image directions.
    pub fn contrastive_loss(
        &self,
        ctx: &mut Ctx,
        images: &[Tensor],
        captions: &[Vec<u32>],
    ) -> Result<NodeId> {
        let b = images.len();
        if b < 2 {
            return Err(Error::contract("contrastive loss needs a batch of at least 2"));
        }
        if captions.len() != b {
            return Err(Error::shape(format!(
                "contrastive loss: {b} images vs {} captions",
                captions.len()
            )));
        }
        let mut img_rows = Vec::with_capacity(b);
        let mut txt_rows = Vec::with_capacity(b);
        for (img, cap) in images.iter().zip(captions) {
            let mounted = ctx.g.constant(img.clone());
            img_rows.push(self.image_tower(ctx, mounted)?.embedding);
            txt_rows.push(self.text_tower(ctx, cap)?);
        }
        let img = ctx.g.concat(&img_rows, 0)?;
        let txt = ctx.g.concat(&txt_rows, 0)?;
        let ni = ctx.g.normalize_rows(img, NORM_EPS)?;
        let nt = ctx.g.normalize_rows(txt, NORM_EPS)?;
        let ntt = ctx.g.permute(nt, &[1, 0])?;
        let sims = ctx.g.matmul(ni, ntt)?;
        let scale = ctx.p("emb.logit_scale")?;
        let logits = ctx.g.mul(sims, scale)?;
        let diag: Vec<u32> = (0..b as u32).collect();
        let ones = vec![1.0f32; b];
        let fwd = ctx.g.cross_entropy(logits, &diag, &ones)?;
        let logits_t = ctx.g.permute(logits, &[1, 0])?;
        let bwd = ctx.g.cross_entropy(logits_t, &diag, &ones)?;
        let sum = ctx.g.add(fwd, bwd)?;
        Ok(ctx.g.scale(sum, 0.5))
    }

    /// Embedding of one image under frozen parameters, as a flat [dim] tensor
    /// (unnormalized; cosine comparisons are scale-free).
    pub fn embed_image(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let mounted = ctx.g.constant(image.clone());
        let tower = self.image_tower(&mut ctx, mounted)?;
        let id = tower.embedding;
        Ok(g.value(id).clone().reshaped(&[self.dim])?)
    }

    /// Embedding of one caption under frozen parameters, as a flat [dim]
    /// tensor.
    pub fn embed_text(&self, store: &ParamStore, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let id = self.text_tower(&mut ctx, tokens)?;
        Ok(g.value(id).clone().reshaped(&[self.dim])?)
    }

    /// Per-token text features under frozen parameters, [len, dim]; the
    /// sequence the image decoder cross-attends over.
    pub fn text_features(&self, store: &ParamStore, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let (rows, _) = self.text_tower_rows(&mut ctx, tokens)?;
        Ok(g.value(rows).clone())
    }

    /// The three post-GELU conv activation maps for one image, shapes
    /// [16,16,16], [32,8,8], [64,4,4]; the perceptual metric compares these.
    pub fn image_features(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let mounted = ctx.g.constant(image.clone());
        let tower = self.image_tower(&mut ctx, mounted)?;
        Ok(tower.maps.iter().map(|&m| g.value(m).clone()).collect())
    }
}
