//! Parameter storage and the layer vocabulary shared by all models.
//!
//! Parameters live in a `ParamStore` keyed by dotted names. A forward pass
//! mounts them onto a fresh graph through `Ctx`, which remembers the
//! name-to-node binding so gradients can be absorbed back after `backward`.
//! Freezing is a mount-time decision: a parameter mounted through a filter
//! that rejects its name joins the graph as a constant, so no gradient can
//! reach it and the optimizer never sees it.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::tape::{Graph, NodeId};
use crate::tensor::Tensor;

/// Weight init scale used everywhere unless a layer overrides it.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Vec<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in sorted order; iteration over parameters is deterministic.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Merge another store under a name prefix (used to pin a pretrained
    /// submodel inside a larger training setup).
    pub fn adopt(&mut self, prefix: &str, other: &ParamStore) {
        for (name, t) in other.iter() {
            self.params.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Extract the subtree under `prefix` into its own store, stripping the
    /// prefix from names.
    pub fn subtree(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        let dotted = format!("{prefix}.");
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(&dotted) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f32]) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
        if p.numel() != grad.len() {
            return Err(Error::shape(format!(
                "gradient size {} vs parameter {name} size {}",
                grad.len(),
                p.numel()
            )));
        }
        let slot = self.grads.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        for (s, &g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(|g| g.as_slice())
    }

    pub fn grads_mut(&mut self) -> &mut BTreeMap<String, Vec<f32>> {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Euclidean norm over every accumulated gradient.
    pub fn grad_global_norm(&self) -> f32 {
        let mut s = 0.0f64;
        for g in self.grads.values() {
            for &v in g {
                s += (v as f64) * (v as f64);
            }
        }
        s.sqrt() as f32
    }
}

/// Records which graph node each parameter was mounted at.
pub struct Bindings(Vec<(String, NodeId)>);

impl Bindings {
    /// Move gradients from the graph into the store (accumulating).
    pub fn absorb(&self, g: &Graph, store: &mut ParamStore) -> Result<()> {
        for (name, id) in &self.0 {
            if let Some(grad) = g.grad(*id) {
                store.accumulate_grad(name, grad)?;
            }
        }
        Ok(())
    }
}

/// One forward pass's view of (graph, parameters, trainability).
pub struct Ctx<'g, 's> {
    pub g: &'g mut Graph,
    store: &'s ParamStore,
    cache: HashMap<String, NodeId>,
    bound: Vec<(String, NodeId)>,
    trainable: Option<Box<dyn Fn(&str) -> bool + 's>>,
}

impl<'g, 's> Ctx<'g, 's> {
    /// Every parameter trainable.
    pub fn new(g: &'g mut Graph, store: &'s ParamStore) -> Self {
        Self { g, store, cache: HashMap::new(), bound: Vec::new(), trainable: None }
    }

    /// Parameters whose name fails the predicate are mounted frozen.
    pub fn with_filter(
        g: &'g mut Graph,
        store: &'s ParamStore,
        trainable: impl Fn(&str) -> bool + 's,
    ) -> Self {
        Self {
            g,
            store,
            cache: HashMap::new(),
            bound: Vec::new(),
            trainable: Some(Box::new(trainable)),
        }
    }

    /// Inference view: nothing trainable, no gradients anywhere.
    pub fn frozen(g: &'g mut Graph, store: &'s ParamStore) -> Self {
        Self::with_filter(g, store, |_| false)
    }

    /// Mount a parameter (memoized per name within this pass).
    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let mut t = self.store.get(name)?.clone();
        let train = self.trainable.as_ref().map_or(true, |f| f(name));
        t.requires_grad = train;
        let id = self.g.leaf(t);
        self.cache.insert(name.to_string(), id);
        if train {
            self.bound.push((name.to_string(), id));
        }
        Ok(id)
    }

    pub fn into_bindings(self) -> Bindings {
        Bindings(self.bound)
    }
}

// ---- parameter initialization ----

pub fn init_tensor(store: &mut ParamStore, name: &str, shape: &[usize], std: f32, rng: &mut Rng) {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(&mut t.data, 0.0, std);
    store.insert(name, t);
}

/// Weight [d_in, d_out] ~ N(0, INIT_STD), bias zero.
pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    init_tensor(store, &format!("{prefix}.w"), &[d_in, d_out], INIT_STD, rng);
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

/// Gain one, bias zero.
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d]));
}

/// Conv weight [c_out, c_in, k, k] ~ N(0, INIT_STD), bias zero.
pub fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut Rng,
) {
    init_tensor(store, &format!("{prefix}.w"), &[c_out, c_in, k, k], INIT_STD, rng);
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[c_out]));
}

// ---- layer application ----

/// x @ W + b over the last axis of x.
pub fn linear(ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let y = ctx.g.matmul(x, w)?;
    ctx.g.add(y, b)
}

pub fn layer_norm(ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gain = ctx.p(&format!("{prefix}.g"))?;
    let bias = ctx.p(&format!("{prefix}.b"))?;
    ctx.g.layer_norm(x, gain, bias, 1e-5)
}

pub fn conv2d(ctx: &mut Ctx, prefix: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    ctx.g.conv2d(x, w, Some(b), stride, pad)
}

/// linear -> gelu -> linear, the feed-forward block of every transformer
/// layer here.
pub fn mlp(ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(ctx, &format!("{prefix}.fc1"), x)?;
    let a = ctx.g.gelu(h);
    linear(ctx, &format!("{prefix}.fc2"), a)
}

/// Scaled dot-product attention over pre-projected q/k/v.
///
/// q: [s, d], k/v: [l, d]; `mask` is additive, shape [s, l], 0 where
/// attention is allowed and a large negative value where it is not.
pub fn attention(
    ctx: &mut Ctx,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<NodeId> {
    let sq = ctx.g.shape(q).to_vec();
    let sk = ctx.g.shape(k).to_vec();
    if sq.len() != 2 || sk.len() != 2 || ctx.g.shape(v) != sk.as_slice() {
        return Err(Error::shape(format!(
            "attention: q {:?} k {:?} v {:?}",
            sq,
            sk,
            ctx.g.shape(v)
        )));
    }
    let (s, d) = (sq[0], sq[1]);
    let l = sk[0];
    if d % heads != 0 {
        return Err(Error::parameter(format!("attention: dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    // [s, d] -> [heads, s, dh]
    let split = |ctx: &mut Ctx, x: NodeId, len: usize| -> Result<NodeId> {
        let r = ctx.g.reshape(x, &[len, heads, dh])?;
        ctx.g.permute(r, &[1, 0, 2])
    };
    let qh = split(ctx, q, s)?;
    let kh = split(ctx, k, l)?;
    let vh = split(ctx, v, l)?;
    let scores = ctx.g.bmm(qh, kh, true)?;
    let mut scaled = ctx.g.scale(scores, 1.0 / (dh as f32).sqrt());
    if let Some(m) = mask {
        if m.shape != [s, l] {
            return Err(Error::shape(format!("attention: mask {:?} vs [{s}, {l}]", m.shape)));
        }
        let mid = ctx.g.constant(m.clone());
        scaled = ctx.g.add(scaled, mid)?;
    }
    let probs = ctx.g.softmax(scaled, 2)?;
    let out = ctx.g.bmm(probs, vh, false)?;
    // [heads, s, dh] -> [s, d]
    let back = ctx.g.permute(out, &[1, 0, 2])?;
    ctx.g.reshape(back, &[s, d])
}

/// Full self-attention block: projections, heads, output projection.
pub fn self_attention(
    ctx: &mut Ctx,
    prefix: &str,
    x: NodeId,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<NodeId> {
    let q = linear(ctx, &format!("{prefix}.q"), x)?;
    let k = linear(ctx, &format!("{prefix}.k"), x)?;
    let v = linear(ctx, &format!("{prefix}.v"), x)?;
    let mixed = attention(ctx, q, k, v, heads, mask)?;
    linear(ctx, &format!("{prefix}.o"), mixed)
}

pub fn init_self_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}.q"), d, d, rng);
    init_linear(store, &format!("{prefix}.k"), d, d, rng);
    init_linear(store, &format!("{prefix}.v"), d, d, rng);
    init_linear(store, &format!("{prefix}.o"), d, d, rng);
}

pub fn init_mlp(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut Rng) {
    init_linear(store, &format!("{prefix}.fc1"), d, hidden, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, d, rng);
}

/// Additive mask value for blocked positions. Finite so softmax stays in
/// its numeric domain even for rows where everything else is blocked too.
pub const MASK_OFF: f32 = -1e9;

/// Sinusoidal position/timestep features: [dim], sin in the first half,
/// cos in the second, geometric frequency ladder.
pub fn sinusoidal_embedding(position: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut t = Tensor::zeros(&[dim]);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half.max(1) as f64);
        let angle = position as f64 * freq;
        t.data[i] = angle.sin() as f32;
        t.data[half + i] = angle.cos() as f32;
    }
    t
}
