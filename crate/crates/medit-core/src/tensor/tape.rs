//! Reverse-mode autodiff on a flat tape.
//!
//! A `Graph` owns every intermediate tensor of one forward pass. Ops append
//! nodes and return `NodeId` handles; `backward` walks the tape in reverse
//! and accumulates gradients into each node that needs them. Graphs are
//! rebuilt per sample, so node ids never outlive the step that made them.

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::{numel, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a + b, with b broadcast when its shape is a suffix of a's.
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// a * b elementwise, same suffix broadcast rule as Add.
    Mul { a: NodeId, b: NodeId },
    /// mul * a + add, elementwise with scalar constants.
    Affine { a: NodeId, mul: f32 },
    /// [..., k] @ [k, n]; leading dims of a are treated as rows.
    Matmul { a: NodeId, b: NodeId },
    /// Batched matmul on rank-3 tensors. With transpose_b, b is [g, n, k].
    Bmm { a: NodeId, b: NodeId, transpose_b: bool },
    Conv2d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    Upsample2x { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    MeanAxis { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu { a: NodeId },
    Embedding { table: NodeId, ids: Vec<u32> },
    /// Weighted mean NLL over rows of [r, v] logits.
    CrossEntropy { logits: NodeId, targets: Vec<u32>, weights: Vec<f32> },
    Mse { a: NodeId, b: NodeId },
    /// Row-wise cosine similarity of two [b, d] tensors -> [b].
    CosineRows { a: NodeId, b: NodeId },
    /// Rows divided by max(row norm, eps).
    NormalizeRows { a: NodeId },
    Reshape { a: NodeId },
    Permute { a: NodeId, perm: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    /// Cached intermediates some backward rules reuse.
    aux: Vec<f32>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, aux: Vec<f32>) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, needs_grad, aux });
        self.nodes.len() - 1
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Mount a tensor; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs, Vec::new())
    }

    /// Mount a constant (never differentiated).
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false, Vec::new())
    }

    // ---- elementwise ----

    fn broadcast_pair(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb || self.nodes[b].value.numel() == 1 {
            return Ok(());
        }
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !ok {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_pair(a, b, "add")?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let bn = vb.data.len();
        let data: Vec<f32> =
            va.data.iter().enumerate().map(|(i, &x)| x + vb.data[i % bn]).collect();
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, out, needs, Vec::new()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("sub: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data: Vec<f32> = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Sub { a, b }, out, needs, Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_pair(a, b, "mul")?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let bn = vb.data.len();
        let data: Vec<f32> =
            va.data.iter().enumerate().map(|(i, &x)| x * vb.data[i % bn]).collect();
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, out, needs, Vec::new()))
    }

    pub fn affine(&mut self, a: NodeId, mul: f32, add: f32) -> NodeId {
        let va = &self.nodes[a].value;
        let data: Vec<f32> = va.data.iter().map(|&x| mul * x + add).collect();
        let out = Tensor { shape: va.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        self.push(Op::Affine { a, mul }, out, needs, Vec::new())
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        self.affine(a, c, 0.0)
    }

    // ---- matmul family ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 {
            return Err(Error::shape(format!("matmul: rhs must be rank 2, got {:?}", sb)));
        }
        let k = *sa.last().ok_or_else(|| Error::shape("matmul: lhs rank 0"))?;
        if k != sb[0] {
            return Err(Error::shape(format!("matmul: inner dims {:?} vs {:?}", sa, sb)));
        }
        let n = sb[1];
        let rows = numel(&sa) / k;
        let mut data = vec![0.0f32; rows * n];
        gemm_nn(&self.nodes[a].value.data, &self.nodes[b].value.data, &mut data, rows, k, n);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, out, needs, Vec::new()))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm: {:?} vs {:?}", sa, sb)));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape(format!("bmm: inner dims {:?} vs {:?} (tb={transpose_b})", sa, sb)));
        }
        let mut data = vec![0.0f32; g * m * n];
        let da = &self.nodes[a].value.data;
        let db = &self.nodes[b].value.data;
        for gi in 0..g {
            let ag = &da[gi * m * k..(gi + 1) * m * k];
            let bg = &db[gi * k * n..(gi + 1) * k * n];
            let cg = &mut data[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                gemm_nt(ag, bg, cg, m, k, n);
            } else {
                gemm_nn(ag, bg, cg, m, k, n);
            }
        }
        let out = Tensor { shape: vec![g, m, n], data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Bmm { a, b, transpose_b }, out, needs, Vec::new()))
    }

    // ---- convolution / resampling ----

    /// x: [c, h, w], w: [o, c, kh, kw], bias: [o]. Symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::shape(format!("conv2d: x {:?}, w {:?}", sx, sw)));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c != cw {
            return Err(Error::shape(format!("conv2d: channels {c} vs {cw}")));
        }
        if stride == 0 {
            return Err(Error::parameter("conv2d: stride 0"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} vs out channels {o}",
                    self.shape(b)
                )));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let mut cols = vec![0.0f32; ckk * oh * ow];
        im2col(&self.nodes[x].value.data, c, h, wd, kh, kw, stride, pad, &mut cols);
        let mut data = vec![0.0f32; o * oh * ow];
        gemm_nn(&self.nodes[w].value.data, &cols, &mut data, o, ckk, oh * ow);
        if let Some(b) = bias {
            let bv = &self.nodes[b].value.data;
            for (oc, chunk) in data.chunks_mut(oh * ow).enumerate() {
                let bo = bv[oc];
                for v in chunk.iter_mut() {
                    *v += bo;
                }
            }
        }
        let out = Tensor { shape: vec![o, oh, ow], data, requires_grad: false, grad: None };
        let mut deps = vec![x, w];
        if let Some(b) = bias {
            deps.push(b);
        }
        let needs = self.any_needs(&deps);
        Ok(self.push(Op::Conv2d { x, w, bias, stride, pad }, out, needs, Vec::new()))
    }

    /// Nearest-neighbour 2x upsampling of [c, h, w].
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape(format!("upsample2x: {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let src = &self.nodes[x].value.data;
        let mut data = vec![0.0f32; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = src[ch * h * w + y * w + xx];
                    let base = ch * 4 * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            data[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                        }
                    }
                }
            }
        }
        let out = Tensor { shape: vec![c, 2 * h, 2 * w], data, requires_grad: false, grad: None };
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(Op::Upsample2x { x }, out, needs, Vec::new()))
    }

    // ---- shape ops ----

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat: no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::parameter(format!("concat: axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len() {
                return Err(Error::shape(format!("concat: rank {:?} vs {:?}", sp, first)));
            }
            for (d, (&a, &b)) in sp.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!("concat: {:?} vs {:?} at dim {d}", sp, first)));
                }
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0f32; numel(&out_shape)];
        let out_row = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let sp_axis = self.shape(p)[axis];
            let src = &self.nodes[p].value.data;
            let chunk = sp_axis * inner;
            for oidx in 0..outer {
                let dst = &mut data[oidx * out_row + offset..oidx * out_row + offset + chunk];
                dst.copy_from_slice(&src[oidx * chunk..(oidx + 1) * chunk]);
            }
            offset += chunk;
        }
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        let needs = self.any_needs(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out, needs, Vec::new()))
    }

    /// Rows [start, start+len) along axis 0.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() {
            return Err(Error::shape("slice_rows: rank 0"));
        }
        if start + len > sa[0] {
            return Err(Error::shape(format!(
                "slice_rows: [{start}, {}) out of {} rows",
                start + len,
                sa[0]
            )));
        }
        let row = numel(&sa) / sa[0];
        let data = self.nodes[a].value.data[start * row..(start + len) * row].to_vec();
        let mut out_shape = sa.clone();
        out_shape[0] = len;
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::SliceRows { a, start, len }, out, needs, Vec::new()))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::parameter(format!("mean_axis: axis {axis} for rank {}", sa.len())));
        }
        let outer: usize = sa[..axis].iter().product();
        let l = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        if l == 0 {
            return Err(Error::contract("mean_axis: empty axis"));
        }
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for li in 0..l {
                    s += src[(o * l + li) * inner + i] as f64;
                }
                data[o * inner + i] = (s / l as f64) as f32;
            }
        }
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::MeanAxis { a, axis }, out, needs, Vec::new()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        let needs = self.nodes[a].needs_grad;
        self.push(Op::SumAll { a }, out, needs, Vec::new())
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.numel();
        if n == 0 {
            return Err(Error::contract("mean_all: empty tensor"));
        }
        let s: f64 = self.nodes[a].value.data.iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / n as f64) as f32);
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::MeanAll { a }, out, needs, Vec::new()))
    }

    // ---- nonlinearities / normalization ----

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::parameter(format!("softmax: axis {axis} for rank {}", sa.len())));
        }
        let outer: usize = sa[..axis].iter().product();
        let l = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |li: usize| src[(o * l + li) * inner + i];
                let mut mx = f32::NEG_INFINITY;
                for li in 0..l {
                    let v = at(li);
                    if !v.is_finite() {
                        return Err(Error::numeric("softmax: non-finite input"));
                    }
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = 0.0f64;
                for li in 0..l {
                    denom += ((at(li) - mx) as f64).exp();
                }
                for li in 0..l {
                    data[(o * l + li) * inner + i] =
                        (((at(li) - mx) as f64).exp() / denom) as f32;
                }
            }
        }
        let out = Tensor { shape: sa, data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::Softmax { a, axis }, out, needs, Vec::new()))
    }

    /// Normalize the last axis to zero mean / unit variance, then apply
    /// per-feature gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm: rank 0"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gain {:?} bias {:?} vs feature dim {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::parameter("layer_norm: eps must be positive"));
        }
        let rows = numel(&sx) / d;
        let src = &self.nodes[x].value.data;
        let gv = &self.nodes[gain].value.data;
        let bv = &self.nodes[bias].value.data;
        let mut data = vec![0.0f32; src.len()];
        let mut aux = vec![0.0f32; 2 * rows];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let mean = (xs.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as f32;
            let var = (xs.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>() / d as f64)
                as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            aux[2 * r] = mean;
            aux[2 * r + 1] = rstd;
            let ys = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                ys[j] = (xs[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let out = Tensor { shape: sx, data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out, needs, aux))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a].value;
        let data: Vec<f32> = src.data.iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor { shape: src.shape.clone(), data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        self.push(Op::Gelu { a }, out, needs, Vec::new())
    }

    // ---- lookup / losses ----

    /// Gather rows of `table` ([v, d]) at `ids`, yielding [len, d].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape(format!("embedding: table {:?}", st)));
        }
        let (v, d) = (st[0], st[1]);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::vocab(format!("embedding: id {id} out of table size {v}")));
            }
        }
        let src = &self.nodes[table].value.data;
        let mut data = vec![0.0f32; ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            data[row * d..(row + 1) * d].copy_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let out = Tensor { shape: vec![ids.len(), d], data, requires_grad: false, grad: None };
        let needs = self.nodes[table].needs_grad;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, out, needs, Vec::new()))
    }

    /// Weighted mean negative log-likelihood over rows. Rows with weight 0
    /// are masked out of both the mean and the gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        weights: &[f32],
    ) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::shape(format!("cross_entropy: logits {:?}", sl)));
        }
        let (r, v) = (sl[0], sl[1]);
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(format!(
                "cross_entropy: {r} rows vs {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
        if wsum <= 0.0 {
            return Err(Error::contract("cross_entropy: all rows masked"));
        }
        let src = &self.nodes[logits].value.data;
        // aux caches row probabilities for the backward pass.
        let mut aux = vec![0.0f32; r * v];
        let mut loss = 0.0f64;
        for row in 0..r {
            let t = targets[row] as usize;
            if t >= v {
                return Err(Error::vocab(format!("cross_entropy: target {t} out of {v}")));
            }
            let xs = &src[row * v..(row + 1) * v];
            let mut mx = f32::NEG_INFINITY;
            for &x in xs {
                if !x.is_finite() {
                    return Err(Error::numeric("cross_entropy: non-finite logit"));
                }
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = 0.0f64;
            for &x in xs {
                denom += ((x - mx) as f64).exp();
            }
            let ps = &mut aux[row * v..(row + 1) * v];
            for (j, &x) in xs.iter().enumerate() {
                ps[j] = (((x - mx) as f64).exp() / denom) as f32;
            }
            let nll = -((xs[t] - mx) as f64 - denom.ln());
            loss += weights[row] as f64 * nll;
        }
        let out = Tensor::scalar((loss / wsum) as f32);
        let needs = self.nodes[logits].needs_grad;
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() },
            out,
            needs,
            aux,
        ))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("mse: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = Tensor::scalar(self.nodes[a].value.mse(&self.nodes[b].value));
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::Mse { a, b }, out, needs, Vec::new()))
    }

    /// Rows scaled to unit length: x / max(|x|, eps) per row of [b, d].
    /// The eps floor keeps zero rows at zero instead of erroring, which the
    /// contrastive loss relies on at init.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f32) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape(format!("normalize_rows: {:?}", sa)));
        }
        if eps <= 0.0 {
            return Err(Error::parameter("normalize_rows: eps must be positive"));
        }
        let (rows, d) = (sa[0], sa[1]);
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0f32; rows * d];
        // aux caches max(norm, eps) and whether the floor was active.
        let mut aux = vec![0.0f32; 2 * rows];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let norm = (xs.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt() as f32;
            let floored = norm < eps;
            let denom = if floored { eps } else { norm };
            aux[2 * r] = denom;
            aux[2 * r + 1] = if floored { 1.0 } else { 0.0 };
            for j in 0..d {
                data[r * d + j] = xs[j] / denom;
            }
        }
        let out = Tensor { shape: sa, data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::NormalizeRows { a }, out, needs, aux))
    }

    /// Cosine similarity per row of two [b, d] tensors.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb || sa.len() != 2 {
            return Err(Error::shape(format!("cosine_rows: {:?} vs {:?}", sa, sb)));
        }
        let (rows, d) = (sa[0], sa[1]);
        let va = &self.nodes[a].value.data;
        let vb = &self.nodes[b].value.data;
        let mut data = vec![0.0f32; rows];
        // aux caches [norm_a, norm_b] per row.
        let mut aux = vec![0.0f32; 2 * rows];
        for r in 0..rows {
            let xs = &va[r * d..(r + 1) * d];
            let ys = &vb[r * d..(r + 1) * d];
            let na = (xs.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt();
            let nb = (ys.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt();
            if na < 1e-12 || nb < 1e-12 {
                return Err(Error::numeric("cosine_rows: zero-norm row"));
            }
            let dp: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x as f64) * (y as f64)).sum();
            data[r] = (dp / (na * nb)) as f32;
            aux[2 * r] = na as f32;
            aux[2 * r + 1] = nb as f32;
        }
        let out = Tensor { shape: vec![rows], data, requires_grad: false, grad: None };
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Op::CosineRows { a, b }, out, needs, aux))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if numel(shape) != va.numel() {
            return Err(Error::shape(format!("reshape: {:?} to {:?}", va.shape, shape)));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: va.data.clone(),
            requires_grad: false,
            grad: None,
        };
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::Reshape { a }, out, needs, Vec::new()))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let rank = sa.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::parameter(format!("permute: {:?} for rank {rank}", perm)));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let in_strides = strides_of(&sa);
        let out_strides = strides_of(&out_shape);
        let src = &self.nodes[a].value.data;
        let mut data = vec![0.0f32; src.len()];
        permute_copy(src, &mut data, &sa, perm, &in_strides, &out_strides);
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        let needs = self.nodes[a].needs_grad;
        Ok(self.push(Op::Permute { a, perm: perm.to_vec() }, out, needs, Vec::new()))
    }

    // ---- backward ----

    /// Reverse sweep from `loss`, which must be scalar. Gradients accumulate
    /// into every reachable node with `needs_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::contract("backward: unknown node"));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss].value.shape
            )));
        }
        if !self.nodes[loss].value.data[0].is_finite() {
            return Err(Error::numeric("backward: non-finite loss"));
        }
        if !self.nodes[loss].needs_grad {
            return Err(Error::contract("backward: loss does not depend on any parameter"));
        }
        self.nodes[loss].grad = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.step_backward(id);
        }
        // Leaves that never received a contribution get an explicit zero
        // gradient so optimizers see them as "no update", not "missing".
        for id in 0..self.nodes.len() {
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn add_into_grad(&mut self, id: NodeId, contrib: Vec<f32>) {
        let node = &mut self.nodes[id];
        debug_assert_eq!(contrib.len(), node.value.numel());
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn step_backward(&mut self, id: NodeId) {
        let op = self.nodes[id].op.clone();
        let gout = self.nodes[id].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.add_into_grad(a, gout.clone());
                }
                if self.needs(b) {
                    let bn = self.nodes[b].value.numel();
                    let mut db = vec![0.0f32; bn];
                    for (i, &g) in gout.iter().enumerate() {
                        db[i % bn] += g;
                    }
                    self.add_into_grad(b, db);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.add_into_grad(a, gout.clone());
                }
                if self.needs(b) {
                    self.add_into_grad(b, gout.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                let bn = self.nodes[b].value.numel();
                if self.needs(a) {
                    let vb = &self.nodes[b].value.data;
                    let da: Vec<f32> =
                        gout.iter().enumerate().map(|(i, &g)| g * vb[i % bn]).collect();
                    self.add_into_grad(a, da);
                }
                if self.needs(b) {
                    let va = &self.nodes[a].value.data;
                    let mut db = vec![0.0f32; bn];
                    for (i, &g) in gout.iter().enumerate() {
                        db[i % bn] += g * va[i];
                    }
                    self.add_into_grad(b, db);
                }
            }
            Op::Affine { a, mul } => {
                if self.needs(a) {
                    self.add_into_grad(a, gout.iter().map(|&g| mul * g).collect());
                }
            }
            Op::Matmul { a, b } => {
                let k = *self.nodes[a].value.shape.last().unwrap();
                let rows = self.nodes[a].value.numel() / k;
                let n = self.nodes[b].value.shape[1];
                if self.needs(a) {
                    let mut da = vec![0.0f32; rows * k];
                    gemm_nt(&gout, &self.nodes[b].value.data, &mut da, rows, n, k);
                    self.add_into_grad(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0f32; k * n];
                    gemm_tn(&self.nodes[a].value.data, &gout, &mut db, k, rows, n);
                    self.add_into_grad(b, db);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = self.nodes[a].value.shape.clone();
                let (g, m, k) = (sa[0], sa[1], sa[2]);
                let n = if transpose_b {
                    self.nodes[b].value.shape[1]
                } else {
                    self.nodes[b].value.shape[2]
                };
                if self.needs(a) {
                    let vb = &self.nodes[b].value.data;
                    let mut da = vec![0.0f32; g * m * k];
                    for gi in 0..g {
                        let go = &gout[gi * m * n..(gi + 1) * m * n];
                        let bg = &vb[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut da[gi * m * k..(gi + 1) * m * k];
                        if transpose_b {
                            // c = a b^T with b [n,k]: da = g @ b
                            gemm_nn(go, bg, dst, m, n, k);
                        } else {
                            // da = g @ b^T with b [k,n]
                            gemm_nt(go, bg, dst, m, n, k);
                        }
                    }
                    self.add_into_grad(a, da);
                }
                if self.needs(b) {
                    let va = &self.nodes[a].value.data;
                    let mut db = vec![0.0f32; g * k * n];
                    for gi in 0..g {
                        let go = &gout[gi * m * n..(gi + 1) * m * n];
                        let ag = &va[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if transpose_b {
                            // b [n,k]: db = g^T @ a
                            gemm_tn(go, ag, dst, n, m, k);
                        } else {
                            // b [k,n]: db = a^T @ g
                            gemm_tn(ag, go, dst, k, m, n);
                        }
                    }
                    self.add_into_grad(b, db);
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let sx = self.nodes[x].value.shape.clone();
                let sw = self.nodes[w].value.shape.clone();
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let (o, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let ckk = c * kh * kw;
                // im2col is recomputed rather than cached; it is cheap next
                // to the matmuls around it.
                let mut cols = vec![0.0f32; ckk * oh * ow];
                im2col(&self.nodes[x].value.data, c, h, wd, kh, kw, stride, pad, &mut cols);
                if self.needs(w) {
                    let mut dw = vec![0.0f32; o * ckk];
                    gemm_nt(&gout, &cols, &mut dw, o, oh * ow, ckk);
                    self.add_into_grad(w, dw);
                }
                if self.needs(x) {
                    let mut dcols = vec![0.0f32; ckk * oh * ow];
                    gemm_tn(&self.nodes[w].value.data, &gout, &mut dcols, ckk, o, oh * ow);
                    let mut dx = vec![0.0f32; c * h * wd];
                    col2im(&dcols, c, h, wd, kh, kw, stride, pad, &mut dx);
                    self.add_into_grad(x, dx);
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let mut db = vec![0.0f32; o];
                        for (oc, chunk) in gout.chunks(oh * ow).enumerate() {
                            let mut s = 0.0f64;
                            for &g in chunk {
                                s += g as f64;
                            }
                            db[oc] = s as f32;
                        }
                        self.add_into_grad(b, db);
                    }
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(x) {
                    let sx = self.nodes[x].value.shape.clone();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let mut dx = vec![0.0f32; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let base = ch * 4 * h * w;
                                let mut s = 0.0f32;
                                for dy in 0..2 {
                                    for dxx in 0..2 {
                                        s += gout[base + (2 * y + dy) * 2 * w + 2 * xx + dxx];
                                    }
                                }
                                dx[ch * h * w + y * w + xx] = s;
                            }
                        }
                    }
                    self.add_into_grad(x, dx);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_row = out_shape[axis] * inner;
                let mut offset = 0usize;
                for &p in &parts {
                    let sp_axis = self.nodes[p].value.shape[axis];
                    let chunk = sp_axis * inner;
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; self.nodes[p].value.numel()];
                        for oidx in 0..outer {
                            dp[oidx * chunk..(oidx + 1) * chunk].copy_from_slice(
                                &gout[oidx * out_row + offset..oidx * out_row + offset + chunk],
                            );
                        }
                        self.add_into_grad(p, dp);
                    }
                    offset += chunk;
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.needs(a) {
                    let sa = self.nodes[a].value.shape.clone();
                    let row = self.nodes[a].value.numel() / sa[0];
                    let mut da = vec![0.0f32; self.nodes[a].value.numel()];
                    da[start * row..(start + len) * row].copy_from_slice(&gout);
                    self.add_into_grad(a, da);
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.needs(a) {
                    let sa = self.nodes[a].value.shape.clone();
                    let outer: usize = sa[..axis].iter().product();
                    let l = sa[axis];
                    let inner: usize = sa[axis + 1..].iter().product();
                    let inv = 1.0 / l as f32;
                    let mut da = vec![0.0f32; self.nodes[a].value.numel()];
                    for o in 0..outer {
                        for li in 0..l {
                            for i in 0..inner {
                                da[(o * l + li) * inner + i] = gout[o * inner + i] * inv;
                            }
                        }
                    }
                    self.add_into_grad(a, da);
                }
            }
            Op::SumAll { a } => {
                if self.needs(a) {
                    let g = gout[0];
                    self.add_into_grad(a, vec![g; self.nodes[a].value.numel()]);
                }
            }
            Op::MeanAll { a } => {
                if self.needs(a) {
                    let n = self.nodes[a].value.numel();
                    let g = gout[0] / n as f32;
                    self.add_into_grad(a, vec![g; n]);
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(a) {
                    let sy = self.nodes[id].value.shape.clone();
                    let outer: usize = sy[..axis].iter().product();
                    let l = sy[axis];
                    let inner: usize = sy[axis + 1..].iter().product();
                    let y = &self.nodes[id].value.data;
                    let mut da = vec![0.0f32; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dotgy = 0.0f64;
                            for li in 0..l {
                                let idx = (o * l + li) * inner + i;
                                dotgy += (gout[idx] * y[idx]) as f64;
                            }
                            for li in 0..l {
                                let idx = (o * l + li) * inner + i;
                                da[idx] = y[idx] * (gout[idx] - dotgy as f32);
                            }
                        }
                    }
                    self.add_into_grad(a, da);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *self.nodes[x].value.shape.last().unwrap();
                let rows = self.nodes[x].value.numel() / d;
                let aux = self.nodes[id].aux.clone();
                let xs = self.nodes[x].value.data.clone();
                let gv = self.nodes[gain].value.data.clone();
                if self.needs(gain) || self.needs(bias) {
                    let mut dgain = vec![0.0f32; d];
                    let mut dbias = vec![0.0f32; d];
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for j in 0..d {
                            let xhat = (xs[r * d + j] - mean) * rstd;
                            dgain[j] += gout[r * d + j] * xhat;
                            dbias[j] += gout[r * d + j];
                        }
                    }
                    if self.needs(gain) {
                        self.add_into_grad(gain, dgain);
                    }
                    if self.needs(bias) {
                        self.add_into_grad(bias, dbias);
                    }
                }
                if self.needs(x) {
                    let mut dx = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for j in 0..d {
                            let xhat = (xs[r * d + j] - mean) * rstd;
                            let dxhat = gout[r * d + j] * gv[j];
                            sum_dxhat += dxhat as f64;
                            sum_dxhat_xhat += (dxhat * xhat) as f64;
                        }
                        let m1 = (sum_dxhat / d as f64) as f32;
                        let m2 = (sum_dxhat_xhat / d as f64) as f32;
                        for j in 0..d {
                            let xhat = (xs[r * d + j] - mean) * rstd;
                            let dxhat = gout[r * d + j] * gv[j];
                            dx[r * d + j] = rstd * (dxhat - m1 - xhat * m2);
                        }
                    }
                    self.add_into_grad(x, dx);
                }
            }
            Op::Gelu { a } => {
                if self.needs(a) {
                    let xs = &self.nodes[a].value.data;
                    let da: Vec<f32> =
                        xs.iter().zip(&gout).map(|(&x, &g)| g * gelu_bwd(x)).collect();
                    self.add_into_grad(a, da);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(table) {
                    let d = self.nodes[table].value.shape[1];
                    let mut dt = vec![0.0f32; self.nodes[table].value.numel()];
                    for (row, &tid) in ids.iter().enumerate() {
                        let dst = &mut dt[tid as usize * d..(tid as usize + 1) * d];
                        let src = &gout[row * d..(row + 1) * d];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                    self.add_into_grad(table, dt);
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                if self.needs(logits) {
                    let v = self.nodes[logits].value.shape[1];
                    let r = targets.len();
                    let wsum: f64 = weights.iter().map(|&w| w as f64).sum();
                    let probs = self.nodes[id].aux.clone();
                    let g = gout[0];
                    let mut dl = vec![0.0f32; r * v];
                    for row in 0..r {
                        let wr = (weights[row] as f64 / wsum) as f32;
                        if wr == 0.0 {
                            continue;
                        }
                        let t = targets[row] as usize;
                        for j in 0..v {
                            let p = probs[row * v + j];
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[row * v + j] = g * wr * (p - onehot);
                        }
                    }
                    self.add_into_grad(logits, dl);
                }
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a].value.numel() as f32;
                let g = gout[0];
                if self.needs(a) || self.needs(b) {
                    let va = self.nodes[a].value.data.clone();
                    let vb = &self.nodes[b].value.data;
                    let diff: Vec<f32> = va
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| 2.0 * (x - y) / n * g)
                        .collect();
                    if self.needs(a) {
                        self.add_into_grad(a, diff.clone());
                    }
                    if self.needs(b) {
                        self.add_into_grad(b, diff.iter().map(|&d| -d).collect());
                    }
                }
            }
            Op::CosineRows { a, b } => {
                let d = self.nodes[a].value.shape[1];
                let rows = self.nodes[a].value.shape[0];
                let aux = self.nodes[id].aux.clone();
                let cosv = self.nodes[id].value.data.clone();
                let va = self.nodes[a].value.data.clone();
                let vb = self.nodes[b].value.data.clone();
                if self.needs(a) {
                    let mut da = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let (na, nb) = (aux[2 * r], aux[2 * r + 1]);
                        let g = gout[r];
                        for j in 0..d {
                            da[r * d + j] = g
                                * (vb[r * d + j] / (na * nb)
                                    - cosv[r] * va[r * d + j] / (na * na));
                        }
                    }
                    self.add_into_grad(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let (na, nb) = (aux[2 * r], aux[2 * r + 1]);
                        let g = gout[r];
                        for j in 0..d {
                            db[r * d + j] = g
                                * (va[r * d + j] / (na * nb)
                                    - cosv[r] * vb[r * d + j] / (nb * nb));
                        }
                    }
                    self.add_into_grad(b, db);
                }
            }
            Op::NormalizeRows { a } => {
                if self.needs(a) {
                    let d = self.nodes[a].value.shape[1];
                    let rows = self.nodes[a].value.shape[0];
                    let aux = self.nodes[id].aux.clone();
                    let y = self.nodes[id].value.data.clone();
                    let mut da = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let denom = aux[2 * r];
                        let floored = aux[2 * r + 1] > 0.5;
                        let gr = &gout[r * d..(r + 1) * d];
                        if floored {
                            // Denominator is the constant eps.
                            for j in 0..d {
                                da[r * d + j] = gr[j] / denom;
                            }
                        } else {
                            let yr = &y[r * d..(r + 1) * d];
                            let gy: f64 = gr
                                .iter()
                                .zip(yr)
                                .map(|(&g, &v)| g as f64 * v as f64)
                                .sum();
                            for j in 0..d {
                                da[r * d + j] = (gr[j] - gy as f32 * yr[j]) / denom;
                            }
                        }
                    }
                    self.add_into_grad(a, da);
                }
            }
            Op::Reshape { a } => {
                if self.needs(a) {
                    self.add_into_grad(a, gout.clone());
                }
            }
            Op::Permute { a, perm } => {
                if self.needs(a) {
                    let sa = self.nodes[a].value.shape.clone();
                    let out_shape = self.nodes[id].value.shape.clone();
                    // Inverse permutation: out axis d came from in axis perm[d].
                    let mut inv = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    let in_strides = strides_of(&out_shape);
                    let out_strides = strides_of(&sa);
                    let mut da = vec![0.0f32; self.nodes[a].value.numel()];
                    permute_copy(&gout, &mut da, &out_shape, &inv, &in_strides, &out_strides);
                    self.add_into_grad(a, da);
                }
            }
        }
    }
}

/// dst[i0', i1', ...] = src[idx] where out axis d reads in axis perm[d].
fn permute_copy(
    src: &[f32],
    dst: &mut [f32],
    in_shape: &[usize],
    perm: &[usize],
    in_strides: &[usize],
    out_strides: &[usize],
) {
    let rank = in_shape.len();
    let n = src.len();
    let mut idx = vec![0usize; rank];
    for (src_lin, &v) in src.iter().enumerate().take(n) {
        // decompose src_lin into the input multi-index
        let mut rem = src_lin;
        for d in 0..rank {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        // the output multi-index at axis d equals idx[perm[d]]
        let mut out_lin = 0usize;
        for d in 0..rank {
            out_lin += idx[perm[d]] * out_strides[d];
        }
        dst[out_lin] = v;
    }
}

fn gelu_fwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}
