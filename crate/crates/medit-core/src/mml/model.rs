//! Instruction model: a small decoder-style transformer that reads an image
//! (as patch tokens) plus a rough edit request and emits an optimized
//! instruction, while exposing an intermediate hidden state as a visual
//! insight vector.
//!
//! Sequence layout (one training example):
//!
//! ```text
//! [BOS] [p_1 .. p_64] [raw request tokens] [EOS] [completion tokens] [EOS]
//!  ^     image patches, bidirectional       ^     next-token targets
//!  |     among themselves + BOS             |
//!  +-- causal elsewhere --------------------+
//! ```
//!
//! Patch positions attend only {BOS, patches}; every text position attends
//! causally to everything before it. Because no prompt position can see the
//! completion, prompt hidden states are identical between training and
//! inference, which the decode cache relies on.
//!
//! Two heads read the trunk:
//! - the text head, a single linear layer over the final hidden states,
//!   scoring next tokens for the completion span;
//! - the vision head, a two-layer MLP over the mean of the tap layer's
//!   hidden states across prompt positions, predicting the joint-embedding
//!   vector of the edited image. Gradients from the vision loss therefore
//!   touch only layers up to the tap and the vision head itself.

use crate::config::MmlSection;
use crate::error::{Error, Result};
use crate::mml::Vocabulary;
use crate::nn::{
    self, init_layer_norm, init_linear, init_mlp, init_self_attention, init_tensor, Ctx,
    ParamStore, INIT_STD, MASK_OFF,
};
use crate::tensor::rng::{Rng, StreamKind};
use crate::tensor::tape::{Graph, NodeId};
use crate::tensor::Tensor;

/// Side length of input images.
pub const IMAGE_SIDE: usize = 32;
/// Longest rough-request text accepted in a prompt.
pub const MAX_RAW_LEN: usize = 24;
/// Hard bound on total sequence length (positions table size).
pub const MAX_SEQ: usize = 176;

/// Architecture contract for one instruction-model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmlModel {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch: usize,
    /// Hidden states are tapped after this many layers (1-based count).
    pub tap_layer: usize,
    /// Width of the joint-embedding space the vision head maps into.
    pub embed_dim: usize,
    pub vocab: usize,
    /// Longest completion emitted before truncation (excluding final EOS).
    pub max_target_len: usize,
    bos: u32,
    eos: u32,
}

/// Patch rows plus the raw request: everything the model conditions on.
#[derive(Debug, Clone)]
pub struct Prompt {
    /// [n_patches, 3 * patch * patch], rows in row-major patch order.
    pub patches: Tensor,
    pub raw: Vec<u32>,
}

/// Graph handles from one full forward pass.
pub struct ForwardOut {
    /// Hidden state after `tap_layer` layers, [total_len, d_model].
    pub h_tap: NodeId,
    /// Final hidden state after the closing layer norm, [total_len, d_model].
    pub h_final: NodeId,
    /// Per-layer full-width key/value rows, [total_len, d_model] each.
    pub kv: Vec<(NodeId, NodeId)>,
    pub prompt_len: usize,
    pub total_len: usize,
}

/// Greedy decode result.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Emitted tokens, final EOS excluded.
    pub tokens: Vec<u32>,
    /// True when the length cap fired before EOS appeared.
    pub truncated: bool,
    /// Visual insight vector from the prompt, [embed_dim].
    pub insight: Tensor,
}

impl MmlModel {
    pub fn from_config(cfg: &MmlSection, vocab: &Vocabulary) -> Result<Self> {
        Self::new(
            cfg.layers,
            cfg.d_model,
            cfg.heads,
            cfg.patch,
            cfg.tap(),
            cfg.embed_dim,
            cfg.max_target_len,
            vocab,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layers: usize,
        d_model: usize,
        heads: usize,
        patch: usize,
        tap_layer: usize,
        embed_dim: usize,
        max_target_len: usize,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if layers == 0 || d_model == 0 || embed_dim == 0 || max_target_len == 0 {
            return Err(Error::parameter("model dims must be positive"));
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::parameter(format!("heads {heads} must divide d_model {d_model}")));
        }
        if patch == 0 || IMAGE_SIDE % patch != 0 {
            return Err(Error::parameter(format!("patch {patch} must divide {IMAGE_SIDE}")));
        }
        if tap_layer == 0 || tap_layer >= layers {
            return Err(Error::parameter(format!(
                "tap layer {tap_layer} must lie strictly inside 1..{layers}"
            )));
        }
        let model = Self {
            layers,
            d_model,
            heads,
            patch,
            tap_layer,
            embed_dim,
            vocab: vocab.len(),
            max_target_len,
            bos: vocab.bos(),
            eos: vocab.eos(),
        };
        let worst = 1 + model.n_patches() + MAX_RAW_LEN + 1 + max_target_len + 1;
        if worst > MAX_SEQ {
            return Err(Error::parameter(format!(
                "sequence budget {worst} exceeds position table {MAX_SEQ}"
            )));
        }
        Ok(model)
    }

    pub fn n_patches(&self) -> usize {
        let side = IMAGE_SIDE / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Fresh parameters under the `mml.` prefix.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = Rng::stream(seed, StreamKind::Init, 1);
        let mut s = ParamStore::new();
        init_tensor(&mut s, "mml.tok", &[self.vocab, self.d_model], INIT_STD, &mut rng);
        init_tensor(&mut s, "mml.pos", &[MAX_SEQ, self.d_model], INIT_STD, &mut rng);
        init_linear(&mut s, "mml.patch_proj", self.patch_dim(), self.d_model, &mut rng);
        for l in 0..self.layers {
            let p = format!("mml.l{l}");
            init_layer_norm(&mut s, &format!("{p}.ln1"), self.d_model);
            init_self_attention(&mut s, &format!("{p}.attn"), self.d_model, &mut rng);
            init_layer_norm(&mut s, &format!("{p}.ln2"), self.d_model);
            init_mlp(&mut s, &format!("{p}.mlp"), self.d_model, 2 * self.d_model, &mut rng);
        }
        init_layer_norm(&mut s, "mml.ln_f", self.d_model);
        init_linear(&mut s, "mml.text_head", self.d_model, self.vocab, &mut rng);
        init_linear(&mut s, "mml.vision.fc1", self.d_model, self.d_model, &mut rng);
        init_linear(&mut s, "mml.vision.fc2", self.d_model, self.embed_dim, &mut rng);
        s
    }

    /// Cut a [3, 32, 32] image into flat patch rows; row (py, px) holds the
    /// patch at that grid cell with features ordered (channel, dy, dx).
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape != [3, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::shape(format!(
                "patchify expects [3, {IMAGE_SIDE}, {IMAGE_SIDE}], got {:?}",
                image.shape
            )));
        }
        let p = self.patch;
        let grid = IMAGE_SIDE / p;
        let mut out = Tensor::zeros(&[grid * grid, self.patch_dim()]);
        for py in 0..grid {
            for px in 0..grid {
                let row = py * grid + px;
                let mut j = 0usize;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            out.data[row * self.patch_dim() + j] =
                                image.data[(c * IMAGE_SIDE + y) * IMAGE_SIDE + x];
                            j += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Bundle an image and a rough request into a prompt, validating lengths
    /// and reserving EOS for the layout itself.
    pub fn encode_prompt(&self, image: &Tensor, raw: &[u32]) -> Result<Prompt> {
        if raw.is_empty() {
            return Err(Error::contract("prompt: empty request"));
        }
        if raw.len() > MAX_RAW_LEN {
            return Err(Error::contract(format!(
                "prompt: request length {} exceeds {MAX_RAW_LEN}",
                raw.len()
            )));
        }
        for &t in raw {
            if t == self.eos || t == self.bos {
                return Err(Error::contract("prompt: request must not contain BOS/EOS"));
            }
            if t as usize >= self.vocab {
                return Err(Error::vocab(format!("prompt: token {t} out of vocabulary")));
            }
        }
        Ok(Prompt { patches: self.patchify(image)?, raw: raw.to_vec() })
    }

    fn prompt_len(&self, prompt: &Prompt) -> usize {
        1 + self.n_patches() + prompt.raw.len() + 1
    }

    /// Additive attention mask: patch rows see {BOS, patches}; text rows are
    /// causal over everything before them.
    pub fn attention_mask(&self, total_len: usize) -> Tensor {
        let n = self.n_patches();
        let mut m = Tensor::full(&[total_len, total_len], MASK_OFF);
        for row in 0..total_len {
            let cols: usize = if row >= 1 && row <= n { n + 1 } else { row + 1 };
            for col in 0..cols.min(total_len) {
                m.data[row * total_len + col] = 0.0;
            }
        }
        m
    }

    /// Full forward pass over prompt ++ completion. The completion may be
    /// empty (decode prefill); when training it must already end with EOS.
    pub fn forward_full(
        &self,
        ctx: &mut Ctx,
        prompt: &Prompt,
        completion: &[u32],
    ) -> Result<ForwardOut> {
        let prompt_len = self.prompt_len(prompt);
        let total_len = prompt_len + completion.len();
        if total_len > MAX_SEQ {
            return Err(Error::contract(format!(
                "sequence length {total_len} exceeds {MAX_SEQ}"
            )));
        }

        // Token embeddings for every text position; patches get projected
        // pixel rows instead.
        let mut text_ids: Vec<u32> = Vec::with_capacity(total_len - self.n_patches());
        text_ids.push(self.bos);
        text_ids.extend_from_slice(&prompt.raw);
        text_ids.push(self.eos);
        text_ids.extend_from_slice(completion);

        let tok_table = ctx.p("mml.tok")?;
        let text_emb = ctx.g.embedding(tok_table, &text_ids)?;
        let bos_row = ctx.g.slice_rows(text_emb, 0, 1)?;
        let tail_rows = ctx.g.slice_rows(text_emb, 1, text_ids.len() - 1)?;

        let patch_const = ctx.g.constant(prompt.patches.clone());
        let patch_emb = nn::linear(ctx, "mml.patch_proj", patch_const)?;

        let seq = ctx.g.concat(&[bos_row, patch_emb, tail_rows], 0)?;
        let pos_table = ctx.p("mml.pos")?;
        let pos = ctx.g.slice_rows(pos_table, 0, total_len)?;
        let mut x = ctx.g.add(seq, pos)?;

        let mask = self.attention_mask(total_len);
        let mut h_tap = None;
        let mut kv = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let p = format!("mml.l{l}");
            let n1 = nn::layer_norm(ctx, &format!("{p}.ln1"), x)?;
            let q = nn::linear(ctx, &format!("{p}.attn.q"), n1)?;
            let k = nn::linear(ctx, &format!("{p}.attn.k"), n1)?;
            let v = nn::linear(ctx, &format!("{p}.attn.v"), n1)?;
            kv.push((k, v));
            let mixed = nn::attention(ctx, q, k, v, self.heads, Some(&mask))?;
            let o = nn::linear(ctx, &format!("{p}.attn.o"), mixed)?;
            x = ctx.g.add(x, o)?;
            let n2 = nn::layer_norm(ctx, &format!("{p}.ln2"), x)?;
            let m = nn::mlp(ctx, &format!("{p}.mlp"), n2)?;
            x = ctx.g.add(x, m)?;
            if l + 1 == self.tap_layer {
                h_tap = Some(x);
            }
        }
        let h_final = nn::layer_norm(ctx, "mml.ln_f", x)?;
        Ok(ForwardOut {
            h_tap: h_tap.expect("tap layer validated in constructor"),
            h_final,
            kv,
            prompt_len,
            total_len,
        })
    }

    /// Next-token cross-entropy over the completion span: position p-1
    /// scores token p for every completion position.
    pub fn text_loss(&self, ctx: &mut Ctx, out: &ForwardOut, completion: &[u32]) -> Result<NodeId> {
        if completion.is_empty() {
            return Err(Error::contract("text loss: empty completion"));
        }
        if out.prompt_len + completion.len() != out.total_len {
            return Err(Error::shape(format!(
                "text loss: completion {} does not match forward length {} - {}",
                completion.len(),
                out.total_len,
                out.prompt_len
            )));
        }
        let logits = nn::linear(ctx, "mml.text_head", out.h_final)?;
        let span = ctx.g.slice_rows(logits, out.prompt_len - 1, completion.len())?;
        let weights = vec![1.0f32; completion.len()];
        ctx.g.cross_entropy(span, completion, &weights)
    }

    /// Visual insight vector [1, embed_dim]: mean of the tap layer's hidden
    /// states over the prompt positions, through the vision head.
    pub fn insight(&self, ctx: &mut Ctx, out: &ForwardOut) -> Result<NodeId> {
        let prompt_rows = ctx.g.slice_rows(out.h_tap, 0, out.prompt_len)?;
        let pooled = ctx.g.mean_axis(prompt_rows, 0)?;
        let row = ctx.g.reshape(pooled, &[1, self.d_model])?;
        let h = nn::linear(ctx, "mml.vision.fc1", row)?;
        let a = ctx.g.gelu(h);
        nn::linear(ctx, "mml.vision.fc2", a)
    }

    /// 1 - cos(insight, goal): zero when aligned, two when opposed.
    pub fn insight_loss(&self, ctx: &mut Ctx, out: &ForwardOut, goal: &Tensor) -> Result<NodeId> {
        if goal.shape != [self.embed_dim] {
            return Err(Error::shape(format!(
                "insight loss: goal {:?}, want [{}]",
                goal.shape, self.embed_dim
            )));
        }
        let v = self.insight(ctx, out)?;
        let goal_row = ctx.g.constant(goal.clone().reshaped(&[1, self.embed_dim])?);
        let cos = ctx.g.cosine_rows(v, goal_row)?;
        let one_minus = ctx.g.affine(cos, -1.0, 1.0);
        ctx.g.mean_all(one_minus)
    }

    /// Insight vector for a prompt under frozen parameters, without decoding
    /// any tokens; value-identical to the insight [`Self::generate`] returns.
    pub fn insight_vector(&self, store: &ParamStore, prompt: &Prompt) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let out = self.forward_full(&mut ctx, prompt, &[])?;
        let id = self.insight(&mut ctx, &out)?;
        Ok(g.value(id).clone().reshaped(&[self.embed_dim])?)
    }

    /// Greedy decode with per-layer key/value caching. Produces exactly the
    /// tokens of [`Self::generate_uncached`] (the cache only skips
    /// recomputation of earlier rows, which the prompt-isolation mask makes
    /// value-identical).
    pub fn generate(&self, store: &ParamStore, prompt: &Prompt) -> Result<Generated> {
        let (mut cache, insight, mut logits) = self.prefill(store, prompt)?;
        let mut tokens = Vec::new();
        let mut truncated = false;
        loop {
            let next = argmax(&logits);
            if next == self.eos {
                break;
            }
            tokens.push(next);
            if tokens.len() >= self.max_target_len {
                truncated = true;
                break;
            }
            let pos = self.prompt_len(prompt) + tokens.len() - 1;
            logits = self.decode_step(store, &mut cache, next, pos)?;
        }
        Ok(Generated { tokens, truncated, insight })
    }

    /// Reference decoder: re-runs the full forward pass for every emitted
    /// token. Kept as the oracle the cached path is checked against.
    pub fn generate_uncached(&self, store: &ParamStore, prompt: &Prompt) -> Result<Generated> {
        let mut tokens: Vec<u32> = Vec::new();
        let mut truncated = false;
        let mut insight = None;
        loop {
            let mut g = Graph::new();
            let (insight_id, logits_id, total_len) = {
                let mut ctx = Ctx::frozen(&mut g, store);
                let out = self.forward_full(&mut ctx, prompt, &tokens)?;
                let ins =
                    if insight.is_none() { Some(self.insight(&mut ctx, &out)?) } else { None };
                let logits = nn::linear(&mut ctx, "mml.text_head", out.h_final)?;
                (ins, logits, out.total_len)
            };
            if let Some(id) = insight_id {
                insight = Some(g.value(id).clone().reshaped(&[self.embed_dim])?);
            }
            let v = self.vocab;
            let row = &g.value(logits_id).data[(total_len - 1) * v..total_len * v];
            let next = argmax(row);
            if next == self.eos {
                break;
            }
            tokens.push(next);
            if tokens.len() >= self.max_target_len {
                truncated = true;
                break;
            }
        }
        Ok(Generated { tokens, truncated, insight: insight.expect("set on first pass") })
    }

    fn prefill(
        &self,
        store: &ParamStore,
        prompt: &Prompt,
    ) -> Result<(Vec<(Tensor, Tensor)>, Tensor, Vec<f32>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let out = self.forward_full(&mut ctx, prompt, &[])?;
        let insight_id = self.insight(&mut ctx, &out)?;
        let logits = nn::linear(&mut ctx, "mml.text_head", out.h_final)?;
        let cache: Vec<(Tensor, Tensor)> =
            out.kv.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect();
        let insight = g.value(insight_id).clone().reshaped(&[self.embed_dim])?;
        let all = g.value(logits);
        let v = self.vocab;
        let row = all.data[(out.total_len - 1) * v..out.total_len * v].to_vec();
        Ok((cache, insight, row))
    }

    /// One decode step: run position `pos` (holding `token`) against the
    /// cached keys/values, extend the cache, return the next-token logits.
    fn decode_step(
        &self,
        store: &ParamStore,
        cache: &mut Vec<(Tensor, Tensor)>,
        token: u32,
        pos: usize,
    ) -> Result<Vec<f32>> {
        if pos + 1 > MAX_SEQ {
            return Err(Error::contract(format!("decode position {pos} exceeds {MAX_SEQ}")));
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let tok_table = ctx.p("mml.tok")?;
        let emb = ctx.g.embedding(tok_table, &[token])?;
        let pos_table = ctx.p("mml.pos")?;
        let pos_row = ctx.g.slice_rows(pos_table, pos, 1)?;
        let mut x = ctx.g.add(emb, pos_row)?;
        let mut new_rows = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let p = format!("mml.l{l}");
            let n1 = nn::layer_norm(&mut ctx, &format!("{p}.ln1"), x)?;
            let q = nn::linear(&mut ctx, &format!("{p}.attn.q"), n1)?;
            let k_new = nn::linear(&mut ctx, &format!("{p}.attn.k"), n1)?;
            let v_new = nn::linear(&mut ctx, &format!("{p}.attn.v"), n1)?;
            let k_old = ctx.g.constant(cache[l].0.clone());
            let v_old = ctx.g.constant(cache[l].1.clone());
            let k_full = ctx.g.concat(&[k_old, k_new], 0)?;
            let v_full = ctx.g.concat(&[v_old, v_new], 0)?;
            let mixed = nn::attention(&mut ctx, q, k_full, v_full, self.heads, None)?;
            let o = nn::linear(&mut ctx, &format!("{p}.attn.o"), mixed)?;
            x = ctx.g.add(x, o)?;
            let n2 = nn::layer_norm(&mut ctx, &format!("{p}.ln2"), x)?;
            let m = nn::mlp(&mut ctx, &format!("{p}.mlp"), n2)?;
            x = ctx.g.add(x, m)?;
            new_rows.push((k_new, v_new));
        }
        let h = nn::layer_norm(&mut ctx, "mml.ln_f", x)?;
        let logits = nn::linear(&mut ctx, "mml.text_head", h)?;
        for (l, (k_new, v_new)) in new_rows.into_iter().enumerate() {
            append_row(&mut cache[l].0, g.value(k_new))?;
            append_row(&mut cache[l].1, g.value(v_new))?;
        }
        Ok(g.value(logits).data.clone())
    }
}

/// First index of the maximum; ties resolve to the lowest token id.
fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn append_row(cache: &mut Tensor, row: &Tensor) -> Result<()> {
    if row.shape.len() != 2 || row.shape[0] != 1 || row.shape[1] != cache.shape[1] {
        return Err(Error::shape(format!(
            "cache append: row {:?} onto {:?}",
            row.shape, cache.shape
        )));
    }
    cache.data.extend_from_slice(&row.data);
    cache.shape[0] += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Bindings;

    fn tiny_model(vocab: &Vocabulary) -> MmlModel {
        MmlModel::new(3, 32, 2, 8, 2, 16, 12, vocab).unwrap()
    }

    fn toy_image(seed: u64) -> Tensor {
        let mut rng = Rng::seeded(seed);
        let mut t = Tensor::zeros(&[3, IMAGE_SIDE, IMAGE_SIDE]);
        for v in t.data.iter_mut() {
            *v = rng.uniform();
        }
        t
    }

    #[test]
    fn patchify_maps_pixels_to_documented_rows() {
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        // Encode the coordinates into the pixel values so any mis-mapping
        // shows up as a wrong value rather than a coincidence.
        let mut img = Tensor::zeros(&[3, IMAGE_SIDE, IMAGE_SIDE]);
        for c in 0..3 {
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    img.data[(c * IMAGE_SIDE + y) * IMAGE_SIDE + x] =
                        (c * 10_000 + y * 100 + x) as f32;
                }
            }
        }
        let p = model.patchify(&img).unwrap();
        assert_eq!(p.shape, [16, 192]);
        // Patch (py=1, px=2) is row 6; feature (c=2, dy=3, dx=5) sits at
        // index 2*64 + 3*8 + 5 inside the row and must hold pixel
        // (c=2, y=11, x=21).
        let got = p.data[6 * 192 + 2 * 64 + 3 * 8 + 5];
        assert_eq!(got, (2 * 10_000 + 11 * 100 + 21) as f32);
    }

    #[test]
    fn mask_isolates_patches_from_text() {
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        let n = model.n_patches();
        let len = n + 6;
        let m = model.attention_mask(len);
        // BOS sees only itself.
        assert_eq!(m.data[0], 0.0);
        assert_eq!(m.data[1], MASK_OFF);
        // A patch row sees BOS and all patches but no text.
        let r = 3;
        for col in 0..=n {
            assert_eq!(m.data[r * len + col], 0.0);
        }
        for col in (n + 1)..len {
            assert_eq!(m.data[r * len + col], MASK_OFF);
        }
        // A text row is causal: everything before it, nothing after.
        let t = n + 3;
        for col in 0..=t {
            assert_eq!(m.data[t * len + col], 0.0);
        }
        for col in (t + 1)..len {
            assert_eq!(m.data[t * len + col], MASK_OFF);
        }
    }

    #[test]
    fn zeroed_model_scores_ln_vocab() {
        // All-zero parameters produce all-zero logits, so the next-token
        // cross-entropy is exactly ln |V| for any completion.
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        let mut store = model.init_params(5);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            store.get_mut(&name).unwrap().data.fill(0.0);
        }
        let raw = vocab.encode("make the circle red").unwrap();
        let prompt = model.encode_prompt(&toy_image(1), &raw).unwrap();
        let mut completion = vocab.encode("recolor the circle").unwrap();
        completion.push(vocab.eos());
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        let out = model.forward_full(&mut ctx, &prompt, &completion).unwrap();
        let loss = model.text_loss(&mut ctx, &out, &completion).unwrap();
        let got = g.value(loss).item();
        let want = (vocab.len() as f64).ln() as f32;
        assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
    }

    #[test]
    fn prompt_rows_ignore_the_completion() {
        // The mask guarantees prompt hidden states cannot depend on
        // completion tokens; check bit-for-bit equality of the tap rows and
        // the insight vector with and without a completion present.
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        let store = model.init_params(6);
        let raw = vocab.encode("move it up").unwrap();
        let prompt = model.encode_prompt(&toy_image(2), &raw).unwrap();
        let mut completion = vocab.encode("move the circle, top left").unwrap();
        completion.push(vocab.eos());

        let run = |completion: &[u32]| {
            let mut g = Graph::new();
            let mut ctx = Ctx::frozen(&mut g, &store);
            let out = model.forward_full(&mut ctx, &prompt, completion).unwrap();
            let ins = model.insight(&mut ctx, &out).unwrap();
            let tap_prompt = g.value(out.h_tap).data[..out.prompt_len * model.d_model].to_vec();
            (tap_prompt, g.value(ins).data.clone())
        };
        let (tap_a, ins_a) = run(&completion);
        let (tap_b, ins_b) = run(&[]);
        assert_eq!(tap_a, tap_b);
        assert_eq!(ins_a, ins_b);
    }

    #[test]
    fn insight_gradients_stop_at_the_tap_layer() {
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        let store = model.init_params(7);
        let raw = vocab.encode("shrink the square").unwrap();
        let prompt = model.encode_prompt(&toy_image(3), &raw).unwrap();
        let mut completion = vocab.encode("resize the square, set size 3").unwrap();
        completion.push(vocab.eos());
        let mut goal = Tensor::zeros(&[model.embed_dim]);
        goal.data[0] = 1.0;

        let grads_for = |loss_kind: &str| -> std::collections::BTreeMap<String, f32> {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store);
            let out = model.forward_full(&mut ctx, &prompt, &completion).unwrap();
            let loss = match loss_kind {
                "insight" => model.insight_loss(&mut ctx, &out, &goal).unwrap(),
                _ => model.text_loss(&mut ctx, &out, &completion).unwrap(),
            };
            let bindings: Bindings = ctx.into_bindings();
            g.backward(loss).unwrap();
            let mut fresh = store.clone();
            fresh.zero_grads();
            bindings.absorb(&g, &mut fresh).unwrap();
            fresh
                .names()
                .map(|n| {
                    let sum = fresh.grad(n).map_or(0.0, |g| g.iter().map(|v| v.abs()).sum());
                    (n.to_string(), sum)
                })
                .collect()
        };

        let gi = grads_for("insight");
        // Layers past the tap, the final norm, and the text head must see
        // exactly zero gradient from the insight loss.
        for (name, sum) in &gi {
            let beyond_tap = (model.tap_layer..model.layers)
                .any(|l| name.starts_with(&format!("mml.l{l}.")));
            if beyond_tap || name.starts_with("mml.ln_f") || name.starts_with("mml.text_head") {
                assert_eq!(*sum, 0.0, "{name} leaked insight gradient");
            }
        }
        // ... while earlier layers and the vision head do train.
        assert!(gi["mml.l0.attn.q.w"] > 0.0);
        assert!(gi["mml.vision.fc1.w"] > 0.0);
        assert!(gi["mml.vision.fc2.w"] > 0.0);

        let gt = grads_for("text");
        for (name, sum) in &gt {
            if name.starts_with("mml.vision.") {
                assert_eq!(*sum, 0.0, "{name} leaked text gradient");
            }
        }
        assert!(gt["mml.text_head.w"] > 0.0);
        assert!(gt[&format!("mml.l{}.attn.q.w", model.layers - 1)] > 0.0);
    }

    #[test]
    fn insight_loss_hits_its_extremes() {
        // Force the insight vector onto a known axis by zeroing the vision
        // head and steering only its bias, then check 1 - cos at aligned,
        // orthogonal, and opposed goals.
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        let mut store = model.init_params(8);
        store.get_mut("mml.vision.fc2.w").unwrap().data.fill(0.0);
        {
            let b = store.get_mut("mml.vision.fc2.b").unwrap();
            b.data.fill(0.0);
            b.data[0] = 1.0;
        }
        let raw = vocab.encode("remove the triangle").unwrap();
        let prompt = model.encode_prompt(&toy_image(4), &raw).unwrap();
        let mut goal = Tensor::zeros(&[model.embed_dim]);
        for (axis0, want) in [(1.0f32, 0.0f32), (0.0, 1.0), (-1.0, 2.0)] {
            goal.data.fill(0.0);
            if axis0 == 0.0 {
                goal.data[1] = 1.0;
            } else {
                goal.data[0] = axis0;
            }
            let mut g = Graph::new();
            let mut ctx = Ctx::frozen(&mut g, &store);
            let out = model.forward_full(&mut ctx, &prompt, &[]).unwrap();
            let loss = model.insight_loss(&mut ctx, &out, &goal).unwrap();
            let got = g.value(loss).item();
            assert!((got - want).abs() < 1e-6, "goal axis {axis0}: got {got}, want {want}");
        }
    }

    #[test]
    fn cached_decode_matches_full_recompute() {
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        for seed in [11u64, 12, 13] {
            let store = model.init_params(seed);
            let raw = vocab.encode("paint the circle blue").unwrap();
            let prompt = model.encode_prompt(&toy_image(seed), &raw).unwrap();
            let fast = model.generate(&store, &prompt).unwrap();
            let slow = model.generate_uncached(&store, &prompt).unwrap();
            assert_eq!(fast.tokens, slow.tokens, "seed {seed}");
            assert_eq!(fast.truncated, slow.truncated, "seed {seed}");
            assert_eq!(fast.insight.data, slow.insight.data, "seed {seed}");
            assert!(fast.tokens.len() <= model.max_target_len);
            let direct = model.insight_vector(&store, &prompt).unwrap();
            assert_eq!(direct.data, fast.insight.data, "seed {seed}");
        }
    }

    #[test]
    fn decode_truncates_at_the_length_cap() {
        let vocab = Vocabulary::core();
        // A freshly initialized model almost never emits EOS within a few
        // steps, so a tiny cap must trip the truncation flag.
        let model = MmlModel::new(2, 32, 2, 8, 1, 16, 3, &vocab).unwrap();
        let store = model.init_params(9);
        let raw = vocab.encode("add a red square").unwrap();
        let prompt = model.encode_prompt(&toy_image(5), &raw).unwrap();
        let out = model.generate(&store, &prompt).unwrap();
        assert!(out.truncated);
        assert_eq!(out.tokens.len(), 3);
    }

    #[test]
    fn prompt_validation_rejects_bad_requests() {
        let vocab = Vocabulary::core();
        let model = tiny_model(&vocab);
        let img = toy_image(6);
        assert!(model.encode_prompt(&img, &[]).is_err());
        assert!(model.encode_prompt(&img, &[vocab.eos()]).is_err());
        assert!(model.encode_prompt(&img, &vec![1u32; MAX_RAW_LEN + 1]).is_err());
        assert!(model.encode_prompt(&img, &[u32::MAX]).is_err());
    }

    #[test]
    fn constructor_rejects_inconsistent_shapes() {
        let vocab = Vocabulary::core();
        assert!(MmlModel::new(3, 30, 4, 8, 2, 16, 12, &vocab).is_err()); // heads
        assert!(MmlModel::new(3, 32, 2, 5, 2, 16, 12, &vocab).is_err()); // patch
        assert!(MmlModel::new(3, 32, 2, 8, 3, 16, 12, &vocab).is_err()); // tap
        assert!(MmlModel::new(3, 32, 2, 8, 0, 16, 12, &vocab).is_err()); // tap
    }
}
