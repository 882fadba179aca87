//! Image-quality metrics and the evaluation report shape.
//!
//! `psnr` and `ssim` are the standard formulas, computed in f64 and checked
//! against closed forms and brute-force references. `clip_i` and
//! `perceptual` stand in for measures that normally require large pretrained
//! networks (image-embedding similarity; learned perceptual distance): both
//! run on this project's own contrastive embedder, and every serialized
//! report carries a note declaring the substitution so the numbers are never
//! read as the originals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::editpipe::{batch_edit, EditModels, EditRequest};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synthdata::corpus::Corpus;
use crate::tensor::rng::{child_seed, StreamKind};
use crate::tensor::{cosine_sim, Tensor};

/// Window edge of the structural-similarity filter.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian sigma of the window.
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers (0.01·L)² and (0.03·L)² with dynamic range L = 1.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Mean-squared error under this floor reports the cap instead of a
/// diverging logarithm; keeps reports serializable.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const PSNR_CAP: f32 = 100.0;
/// Norm floor when unit-normalizing perceptual feature columns.
const FEATURE_NORM_EPS: f64 = 1e-6;

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f32> {
    same_shape("psnr", a, b)?;
    if a.numel() == 0 {
        return Err(Error::parameter("psnr: empty image"));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = (*x as f64) - (*y as f64);
        acc += d * d;
    }
    let mse = acc / a.numel() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()) as f32)
}

/// Normalized 1-D Gaussian window of edge [`SSIM_WINDOW`].
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge
/// sample (-1 maps to 1, n maps to n-2). Valid while the overhang is < n,
/// which the window-size precondition guarantees.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    j as usize
}

/// One channel plane with reflection padding of `pad` on every side, f64.
fn padded_plane(src: &[f32], h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f64; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize - pad as isize, h);
        for x in 0..pw {
            let sx = reflect(x as isize - pad as isize, w);
            out[y * pw + x] = src[sy * w + sx] as f64;
        }
    }
    out
}

/// Separable Gaussian filter: horizontal then vertical pass, shrinking a
/// padded [h + 2·pad, w + 2·pad] plane to valid [h, w] local means.
fn filter_plane(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let pad = SSIM_WINDOW / 2;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    debug_assert_eq!(p.len(), ph * pw);
    let mut horiz = vec![0.0f64; ph * w];
    for y in 0..ph {
        let row = &p[y * pw..(y + 1) * pw];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * row[x + j];
            }
            horiz[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + j) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Single-scale structural similarity over [c, h, w] images in [0, 1]:
/// 11×11 Gaussian window (sigma 1.5), reflection padding, computed per
/// channel and averaged over every channel and position.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f32> {
    same_shape("ssim", a, b)?;
    if a.rank() != 3 {
        return Err(Error::shape(format!("ssim: want [c, h, w], got {:?}", a.shape)));
    }
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::parameter(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let pad = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    for ch in 0..c {
        let pa = padded_plane(&a.data[ch * h * w..(ch + 1) * h * w], h, w, pad);
        let pb = padded_plane(&b.data[ch * h * w..(ch + 1) * h * w], h, w, pad);
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_plane(&pa, h, w, &k);
        let mu_b = filter_plane(&pb, h, w, &k);
        let e_aa = filter_plane(&paa, h, w, &k);
        let e_bb = filter_plane(&pbb, h, w, &k);
        let e_ab = filter_plane(&pab, h, w, &k);
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok((total / (c * h * w) as f64) as f32)
}

/// Perceptual feature distance over the embedder's three conv activation
/// maps: at every spatial position the channel column is unit-normalized,
/// and the squared distance between the normalized columns is averaged over
/// positions and maps. Zero for identical inputs; symmetric.
pub fn perceptual(emb: &Embedder, store: &ParamStore, a: &Tensor, b: &Tensor) -> Result<f32> {
    same_shape("perceptual", a, b)?;
    let fa = emb.image_features(store, a)?;
    let fb = emb.image_features(store, b)?;
    let mut total = 0.0f64;
    for (ma, mb) in fa.iter().zip(&fb) {
        let (c, hw) = (ma.shape[0], ma.shape[1] * ma.shape[2]);
        let col_norm = |m: &Tensor, p: usize| -> f64 {
            let mut s = 0.0f64;
            for ch in 0..c {
                let v = m.data[ch * hw + p] as f64;
                s += v * v;
            }
            s.sqrt().max(FEATURE_NORM_EPS)
        };
        let mut acc = 0.0f64;
        for p in 0..hw {
            let (na, nb) = (col_norm(ma, p), col_norm(mb, p));
            for ch in 0..c {
                let d = ma.data[ch * hw + p] as f64 / na - mb.data[ch * hw + p] as f64 / nb;
                acc += d * d;
            }
        }
        total += acc / hw as f64;
    }
    Ok((total / fa.len() as f64) as f32)
}

/// Cosine similarity of the two images' embeddings; symmetric and invariant
/// to positive rescaling of either embedding.
pub fn clip_i(emb: &Embedder, store: &ParamStore, a: &Tensor, b: &Tensor) -> Result<f32> {
    same_shape("clip_i", a, b)?;
    let ea = emb.embed_image(store, a)?;
    let eb = emb.embed_image(store, b)?;
    cosine_sim(&ea, &eb)
}

/// One row of metric values, in the report's column order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub clip_i: f64,
    pub perceptual: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let mut out = MetricRow::default();
        for r in rows {
            out.clip_i += r.clip_i;
            out.perceptual += r.perceptual;
            out.psnr += r.psnr;
            out.ssim += r.ssim;
        }
        out.clip_i /= n;
        out.perceptual /= n;
        out.psnr /= n;
        out.ssim /= n;
        out
    }
}

/// Metrics for one evaluated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u32,
    pub edited: MetricRow,
    pub copy_source: MetricRow,
}

/// Declared on every report: two columns are computed by this project's own
/// embedder rather than the usual pretrained networks.
pub const SUBSTITUTION_NOTE: &str = "clip_i and perceptual are embedder-backed stand-ins \
     (contrastive image-embedding cosine; normalized conv-feature distance), not CLIP or \
     LPIPS; absolute values are not comparable across embedders.";

/// What an evaluation run did: which pipeline stages were active, whether
/// edits were mask-restricted, and the seed the per-item seeds derive from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub use_mask: bool,
    pub use_t_opt: bool,
    pub use_v_insight: bool,
    pub seed: u64,
}

impl EvalOptions {
    /// Full pipeline, mask-restricted edits.
    pub fn new(seed: u64) -> EvalOptions {
        EvalOptions { use_mask: true, use_t_opt: true, use_v_insight: true, seed }
    }
}

/// Evaluation summary: aggregate rows for the edited outputs and for the
/// copy-source baseline (output := I_src), plus per-sample values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub note: String,
    pub corpus: String,
    pub options: EvalOptions,
    pub checkpoints: BTreeMap<String, String>,
    /// Samples evaluated (excludes failures).
    pub count: usize,
    pub failures: usize,
    pub edited: MetricRow,
    pub copy_source: MetricRow,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(
        corpus: impl Into<String>,
        options: EvalOptions,
        checkpoints: BTreeMap<String, String>,
        per_sample: Vec<SampleMetrics>,
        failures: usize,
    ) -> MetricReport {
        let edited: Vec<MetricRow> = per_sample.iter().map(|s| s.edited).collect();
        let copy: Vec<MetricRow> = per_sample.iter().map(|s| s.copy_source).collect();
        MetricReport {
            note: SUBSTITUTION_NOTE.to_string(),
            corpus: corpus.into(),
            options,
            checkpoints,
            count: per_sample.len(),
            failures,
            edited: MetricRow::mean(&edited),
            copy_source: MetricRow::mean(&copy),
            per_sample,
        }
    }

    /// Aligned-text rendering: one row per system, columns in the fixed
    /// order clip_i / perceptual / psnr / ssim.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.note));
        out.push_str(&format!("# corpus: {}  samples: {}  failures: {}\n", self.corpus, self.count, self.failures));
        let o = &self.options;
        out.push_str(&format!(
            "# t_opt: {}  v_insight: {}  mask: {}  seed: {}\n",
            o.use_t_opt, o.use_v_insight, o.use_mask, o.seed
        ));
        out.push_str(&format!(
            "{:<14} {:>10} {:>12} {:>10} {:>10}\n",
            "system", "clip_i", "perceptual", "psnr", "ssim"
        ));
        for (name, row) in [("edited", &self.edited), ("copy-source", &self.copy_source)] {
            out.push_str(&format!(
                "{:<14} {:>10.4} {:>12.4} {:>10.4} {:>10.4}\n",
                name, row.clip_i, row.perceptual, row.psnr, row.ssim
            ));
        }
        out
    }
}

/// All four metrics for one output/target pair, using the evaluator's own
/// embedder for the two feature-based columns.
fn score(models: &EditModels, output: &Tensor, target: &Tensor) -> Result<MetricRow> {
    Ok(MetricRow {
        clip_i: clip_i(&models.embedder, &models.embedder_store, output, target)? as f64,
        perceptual: perceptual(&models.embedder, &models.embedder_store, output, target)? as f64,
        psnr: psnr(output, target)? as f64,
        ssim: ssim(output, target)? as f64,
    })
}

/// Run the edit pipeline over a corpus split and score every output against
/// its ground-truth edited image, next to the copy-source baseline (pretend
/// the edit returned the source unchanged). Per-item failures are excluded
/// from the aggregates and counted; each item's sampling seed derives from
/// `options.seed` and the sample id, so single items can be replayed.
pub fn evaluate(models: &EditModels, corpus: &Corpus, options: EvalOptions) -> Result<MetricReport> {
    let samples = corpus.load_all()?;
    let requests: Vec<EditRequest> = corpus
        .entries
        .iter()
        .zip(&samples)
        .map(|(entry, s)| EditRequest {
            i_src: s.i_src.clone(),
            t_raw: s.t_raw.clone(),
            mask: if options.use_mask { Some(s.mask.clone()) } else { None },
            seed: child_seed(options.seed, StreamKind::Data, entry.id as u64),
            use_t_opt: options.use_t_opt,
            use_v_insight: options.use_v_insight,
            steps: models.schedule.len(),
        })
        .collect();

    let mut per_sample = Vec::new();
    let mut failures = 0usize;
    let results = batch_edit(models, &requests);
    for ((entry, sample), result) in corpus.entries.iter().zip(&samples).zip(results) {
        let scored = result.and_then(|res| {
            Ok(SampleMetrics {
                id: entry.id,
                edited: score(models, &res.image, &sample.i_gt)?,
                copy_source: score(models, &sample.i_src, &sample.i_gt)?,
            })
        });
        match scored {
            Ok(row) => per_sample.push(row),
            Err(err) => {
                failures += 1;
                eprintln!("eval: sample {} failed: {err}", entry.id);
            }
        }
    }

    let mut checkpoints = BTreeMap::new();
    checkpoints.insert("embedder".into(), checkpoint::hash_hex(&models.meta.embedder_hash));
    checkpoints.insert("autoencoder".into(), checkpoint::hash_hex(&models.meta.autoencoder_hash));
    checkpoints.insert(
        "diffusion.insight_teacher".into(),
        models
            .meta
            .mml_hash
            .as_ref()
            .map(checkpoint::hash_hex)
            .unwrap_or_else(|| "image-embedding-oracle".into()),
    );
    Ok(MetricReport::from_samples(
        corpus.dir.display().to_string(),
        options,
        checkpoints,
        per_sample,
        failures,
    ))
}
