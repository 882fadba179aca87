//! Conditioning-source study: six pipeline configurations that vary which
//! stages are enabled and whether each steering signal comes from the
//! jointly trained instruction model or from a variant trained on that
//! signal's loss alone.
//!
//! The harness trains everything it needs from scratch on its own corpus
//! (sizes and epoch counts from [`crate::config::AblationConfig`]), then
//! evaluates each arrangement on the held-out split with shared per-item
//! seeds so rows are directly comparable. Two weight-perturbation probes
//! verify that the single-signal rows (#1, #2) really depend on exactly one
//! conditioning signal; the expectation that joint training beats the
//! independent variants is logged, not asserted — at this scale a training
//! run is free to disagree.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::editpipe::{edit, EditModels, EditRequest};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricRow, SUBSTITUTION_NOTE};
use crate::nn::ParamStore;
use crate::synthdata::corpus::{read_split, write_corpus, Corpus};
use crate::tensor::rng::{child_seed, Rng, StreamKind};
use crate::train::{
    train_autoencoder, train_diffusion, train_embedder, train_mml, InsightTeacher, TrainMode,
    TrainSummary,
};

/// Where a steering signal comes from in one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The jointly trained model (both losses).
    Joint,
    /// The variant trained on this signal's loss alone.
    Independent,
    /// Signal disabled for this row.
    Off,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Joint => "J",
            Source::Independent => "I",
            Source::Off => "-",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The six configurations, in report order.
pub const ROWS: [(u32, Source, Source); 6] = [
    (1, Source::Joint, Source::Off),
    (2, Source::Off, Source::Joint),
    (3, Source::Independent, Source::Independent),
    (4, Source::Joint, Source::Independent),
    (5, Source::Independent, Source::Joint),
    (6, Source::Joint, Source::Joint),
];

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub exp: u32,
    /// Strategy flags: was the stage run at all?
    pub use_t_opt: bool,
    pub use_v_insight: bool,
    /// Signal provenance (J/I/off), mirrored by the flags.
    pub t_opt_source: Source,
    pub v_insight_source: Source,
    /// Mean metrics over the held-out split; absent when the row failed.
    pub metrics: Option<MetricRow>,
    /// Per-item edit failures excluded from the mean.
    pub eval_failures: usize,
    pub error: Option<String>,
}

/// Everything one study run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub note: String,
    pub corpus: String,
    pub seed: u64,
    pub use_mask: bool,
    pub wall_clock_secs: f64,
    /// Stage name → checkpoint hash.
    pub checkpoints: BTreeMap<String, String>,
    pub rows: Vec<AblationRow>,
    /// Score of returning the source image unchanged, for reference.
    pub copy_source: Option<MetricRow>,
    /// Outcomes of the single-signal dependence probes.
    pub probes: Vec<String>,
    /// Logged comparison of joint (#6) against independent (#3).
    pub soft_checks: Vec<String>,
    pub warnings: Vec<String>,
}

impl AblationReport {
    /// Aligned-text rendering, one line per configuration.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.note));
        out.push_str(&format!(
            "# corpus: {}  eval seed: {}  mask: {}  wall clock: {:.1}s\n",
            self.corpus, self.seed, self.use_mask, self.wall_clock_secs
        ));
        out.push_str(&format!(
            "{:<4} {:<6} {:<10} {:<6} {:<6} {:>10} {:>12} {:>10} {:>10}\n",
            "exp", "t_opt", "v_insight", "src_t", "src_v", "clip_i", "perceptual", "psnr", "ssim"
        ));
        for row in &self.rows {
            let head = format!(
                "#{:<3} {:<6} {:<10} {:<6} {:<6}",
                row.exp,
                if row.use_t_opt { "on" } else { "-" },
                if row.use_v_insight { "on" } else { "-" },
                row.t_opt_source,
                row.v_insight_source,
            );
            match (&row.metrics, &row.error) {
                (Some(m), _) => out.push_str(&format!(
                    "{head} {:>10.4} {:>12.4} {:>10.4} {:>10.4}\n",
                    m.clip_i, m.perceptual, m.psnr, m.ssim
                )),
                (None, Some(e)) => out.push_str(&format!("{head} FAILED: {e}\n")),
                (None, None) => out.push_str(&format!("{head} FAILED\n")),
            }
        }
        if let Some(b) = &self.copy_source {
            out.push_str(&format!(
                "{:<35} {:>10.4} {:>12.4} {:>10.4} {:>10.4}\n",
                "copy-source baseline", b.clip_i, b.perceptual, b.psnr, b.ssim
            ));
        }
        for line in self.probes.iter().chain(&self.soft_checks).chain(&self.warnings) {
            out.push_str(&format!("# {line}\n"));
        }
        out
    }
}

fn absorb(
    stage: &str,
    summary: &TrainSummary,
    checkpoints: &mut BTreeMap<String, String>,
    warnings: &mut Vec<String>,
) {
    checkpoints.insert(stage.to_string(), checkpoint::hash_hex(&summary.hash));
    for w in &summary.warnings {
        warnings.push(format!("{stage}: {w}"));
    }
}

/// Add Gaussian noise to every value in the store, large enough that any
/// live computation path through these weights must change its output.
fn perturb_store(store: &mut ParamStore, rng: &mut Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        for v in store.get_mut(name).expect("listed name").data.iter_mut() {
            *v += 0.5 * rng.normal();
        }
    }
}

struct StagePaths<'a> {
    embedder: &'a Path,
    autoencoder: &'a Path,
    diffusion: &'a Path,
}

/// Verify that a single-signal row reacts to exactly its own signal: with
/// only one stage enabled, scrambling the other model's weights must leave
/// the output bit-identical, while scrambling the live model must change
/// the signal it feeds the decoder (a failed re-edit also counts — the path
/// is demonstrably in use). Whether the changed signal moves the output
/// image is recorded but not asserted: early in training the conditioning
/// weights are small enough that the difference can round away.
fn probe_single_signal_row(
    cfg: &RunConfig,
    paths: &StagePaths,
    joint_ckpt: &Path,
    request: &EditRequest,
    exp: u32,
    probes: &mut Vec<String>,
) -> Result<()> {
    let mut models = EditModels::load_split(
        cfg,
        paths.embedder,
        joint_ckpt,
        joint_ckpt,
        paths.autoencoder,
        paths.diffusion,
    )?;
    let mut req = request.clone();
    req.use_t_opt = exp == 1;
    req.use_v_insight = exp == 2;
    let (off_name, live_name) =
        if exp == 1 { ("insight", "instruction") } else { ("instruction", "insight") };

    let base = edit(&models, &req)?;
    let mut rng = Rng::stream(req.seed, StreamKind::Init, 99);

    let off_store =
        if exp == 1 { &mut models.insight_store } else { &mut models.instruction_store };
    perturb_store(off_store, &mut rng);
    let inert = edit(&models, &req)?;
    if inert.image.data != base.image.data {
        return Err(Error::integrity(format!(
            "row #{exp}: output changed after perturbing the disabled {off_name} model; \
             the stage flag is not sound"
        )));
    }
    probes.push(format!(
        "row #{exp}: scrambling every {off_name}-model weight leaves the output bit-identical"
    ));

    let live_store =
        if exp == 1 { &mut models.instruction_store } else { &mut models.insight_store };
    perturb_store(live_store, &mut rng);
    match edit(&models, &req) {
        Ok(out) if out.image.data == base.image.data => {
            return Err(Error::integrity(format!(
                "row #{exp}: output ignored a perturbation of the live {live_name} model; \
                 the conditioning signal appears dead"
            )));
        }
        Ok(_) => probes
            .push(format!("row #{exp}: scrambling the {live_name} model changes the output")),
        Err(e) => probes.push(format!(
            "row #{exp}: scrambling the {live_name} model breaks the edit ({e}); path is live"
        )),
    }
    Ok(())
}

/// Evaluate all six configurations against shared checkpoints and per-item
/// seeds. A missing independent variant fails exactly the rows that need it;
/// the rest still run.
#[allow(clippy::too_many_arguments)]
fn build_rows(
    scaled: &RunConfig,
    paths: &StagePaths,
    joint: &TrainSummary,
    text_only: &Result<TrainSummary>,
    vision_only: &Result<TrainSummary>,
    test_split: &Corpus,
    use_mask: bool,
    seed: u64,
) -> (Vec<AblationRow>, Option<MetricRow>) {
    let resolve = |source: Source, independent: &Result<TrainSummary>| -> Result<std::path::PathBuf> {
        match source {
            // Disabled slots still need a loadable checkpoint; the joint one
            // stands in and the probes prove it is inert.
            Source::Joint | Source::Off => Ok(joint.checkpoint.clone()),
            Source::Independent => match independent {
                Ok(s) => Ok(s.checkpoint.clone()),
                Err(e) => Err(Error::config(format!("independent variant unavailable: {e}"))),
            },
        }
    };

    let mut rows = Vec::new();
    let mut copy_source = None;
    for (exp, t_src, v_src) in ROWS {
        let mut row = AblationRow {
            exp,
            use_t_opt: t_src != Source::Off,
            use_v_insight: v_src != Source::Off,
            t_opt_source: t_src,
            v_insight_source: v_src,
            metrics: None,
            eval_failures: 0,
            error: None,
        };
        let outcome = resolve(t_src, text_only).and_then(|instruction| {
            let insight = resolve(v_src, vision_only)?;
            let models = EditModels::load_split(
                scaled,
                paths.embedder,
                &instruction,
                &insight,
                paths.autoencoder,
                paths.diffusion,
            )?;
            let opts = EvalOptions {
                use_mask,
                use_t_opt: row.use_t_opt,
                use_v_insight: row.use_v_insight,
                seed,
            };
            eprintln!("ablation: evaluating row #{exp}");
            evaluate(&models, test_split, opts)
        });
        match outcome {
            Ok(report) => {
                row.eval_failures = report.failures;
                if report.count == 0 {
                    row.error = Some(format!("all {} edits failed", report.failures));
                } else {
                    row.metrics = Some(report.edited);
                    copy_source.get_or_insert(report.copy_source);
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    (rows, copy_source)
}

/// Train all prerequisite models on a fresh corpus and evaluate the six
/// configurations. Independent-variant training failures mark their rows
/// failed and the run continues; failures in stages every row needs
/// (embedder, autoencoder, joint model, diffusion) abort.
pub fn run_ablation(cfg: &RunConfig, out: &Path) -> Result<AblationReport> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let a = &cfg.ablation;

    eprintln!("ablation: generating corpus ({} train / {} test)", a.train, a.test);
    let data_dir = out.join("data");
    write_corpus(&data_dir, a.seed, a.train, a.test)?;
    let train_split = read_split(&data_dir.join("train"))?;
    let test_split = read_split(&data_dir.join("test"))?;
    if test_split.len() == 0 {
        return Err(Error::parameter("ablation: test split is empty"));
    }

    let mut scaled = cfg.clone();
    scaled.embedder.epochs = a.embedder_epochs;
    scaled.autoencoder.epochs = a.autoencoder_epochs;
    scaled.mml.epochs = a.mml_epochs;
    scaled.diffusion.epochs = a.diffusion_epochs;
    scaled.validate()?;

    let mut warnings = Vec::new();
    let mut checkpoints = BTreeMap::new();

    eprintln!("ablation: training embedder");
    let emb = train_embedder(&scaled, &train_split, out)?;
    absorb("embedder", &emb, &mut checkpoints, &mut warnings);
    eprintln!("ablation: training autoencoder");
    let ae = train_autoencoder(&scaled, &train_split, Some(&test_split), out)?;
    absorb("autoencoder", &ae, &mut checkpoints, &mut warnings);

    // The variants start from independent seeds; they share nothing with the
    // joint model but the architecture and corpus.
    let variant = |mode: TrainMode, seed_offset: u64| -> Result<TrainSummary> {
        let mut c = scaled.clone();
        c.mml.seed = c.mml.seed.wrapping_add(seed_offset);
        eprintln!("ablation: training {} instruction model", mode.name());
        train_mml(&c, &train_split, &emb.checkpoint, mode, out)
    };
    let joint = variant(TrainMode::Joint, 0)?;
    absorb("instruction-joint", &joint, &mut checkpoints, &mut warnings);
    let text_only = variant(TrainMode::TextOnly, 1);
    let vision_only = variant(TrainMode::VisionOnly, 2);
    for (name, r) in [("instruction-text-only", &text_only), ("instruction-vision-only", &vision_only)] {
        match r {
            Ok(s) => absorb(name, s, &mut checkpoints, &mut warnings),
            Err(e) => warnings.push(format!("{name}: training failed: {e}")),
        }
    }

    eprintln!("ablation: training diffusion (joint-model insight teacher)");
    let diff = train_diffusion(
        &scaled,
        &train_split,
        &emb.checkpoint,
        &ae.checkpoint,
        InsightTeacher::Mml(&joint.checkpoint),
        out,
    )?;
    absorb("diffusion", &diff, &mut checkpoints, &mut warnings);
    let paths = StagePaths {
        embedder: &emb.checkpoint,
        autoencoder: &ae.checkpoint,
        diffusion: &diff.checkpoint,
    };

    let (rows, copy_source) = build_rows(
        &scaled,
        &paths,
        &joint,
        &text_only,
        &vision_only,
        &test_split,
        cfg.eval.use_mask,
        a.seed,
    );

    // Single-signal soundness probes on a held-out sample, using the same
    // request the evaluator would issue for it.
    let probe_sample = test_split.load(0)?;
    let probe_request = EditRequest {
        i_src: probe_sample.i_src,
        t_raw: probe_sample.t_raw,
        mask: if cfg.eval.use_mask { Some(probe_sample.mask) } else { None },
        seed: child_seed(a.seed, StreamKind::Data, test_split.entries[0].id as u64),
        use_t_opt: true,
        use_v_insight: true,
        steps: scaled.diffusion.timesteps,
    };
    let mut probes = Vec::new();
    for exp in [1, 2] {
        probe_single_signal_row(&scaled, &paths, &joint.checkpoint, &probe_request, exp, &mut probes)?;
    }

    let mut soft_checks = Vec::new();
    let find = |exp: u32| rows.iter().find(|r| r.exp == exp).and_then(|r| r.metrics);
    if let (Some(j), Some(i)) = (find(6), find(3)) {
        for (name, jv, iv, higher_is_better) in [
            ("clip_i", j.clip_i, i.clip_i, true),
            ("perceptual", j.perceptual, i.perceptual, false),
            ("psnr", j.psnr, i.psnr, true),
            ("ssim", j.ssim, i.ssim, true),
        ] {
            let ok = if higher_is_better { jv >= iv } else { jv <= iv };
            soft_checks.push(format!(
                "joint (#6) vs independent (#3) {name}: {jv:.4} vs {iv:.4} — {}",
                if ok { "matches the expected ordering" } else { "violates the expected ordering (not asserted)" }
            ));
        }
    } else {
        soft_checks.push("joint-vs-independent comparison skipped: a row is missing".into());
    }

    Ok(AblationReport {
        note: SUBSTITUTION_NOTE.to_string(),
        corpus: data_dir.display().to_string(),
        seed: a.seed,
        use_mask: cfg.eval.use_mask,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints,
        rows,
        copy_source,
        probes,
        soft_checks,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::tiny_config;

    fn smoke_config() -> RunConfig {
        let mut cfg = tiny_config();
        cfg.embedder.epochs = 1;
        cfg.embedder.batch_size = 3;
        cfg.autoencoder.epochs = 1;
        cfg.autoencoder.batch_size = 4;
        cfg.mml.epochs = 1;
        cfg.mml.batch_size = 3;
        cfg.diffusion.epochs = 1;
        cfg.diffusion.batch_size = 3;
        cfg.ablation.train = 6;
        cfg.ablation.test = 2;
        cfg.ablation.embedder_epochs = 1;
        cfg.ablation.autoencoder_epochs = 1;
        cfg.ablation.mml_epochs = 1;
        cfg.ablation.diffusion_epochs = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    #[ignore]
    fn debug_probe_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        let a = &cfg.ablation;
        let data_dir = dir.path().join("data");
        write_corpus(&data_dir, a.seed, a.train, a.test).unwrap();
        let train_split = read_split(&data_dir.join("train")).unwrap();
        let test_split = read_split(&data_dir.join("test")).unwrap();
        let mut scaled = cfg.clone();
        scaled.embedder.epochs = a.embedder_epochs;
        scaled.autoencoder.epochs = a.autoencoder_epochs;
        scaled.mml.epochs = a.mml_epochs;
        scaled.diffusion.epochs = a.diffusion_epochs;
        let emb = train_embedder(&scaled, &train_split, dir.path()).unwrap();
        let ae = train_autoencoder(&scaled, &train_split, None, dir.path()).unwrap();
        let joint = train_mml(&scaled, &train_split, &emb.checkpoint, TrainMode::Joint, dir.path()).unwrap();
        let diff = train_diffusion(&scaled, &train_split, &emb.checkpoint, &ae.checkpoint, InsightTeacher::Mml(&joint.checkpoint), dir.path()).unwrap();

        let (unet_store, _) = checkpoint::load(&diff.checkpoint).unwrap();
        for name in ["unet.attn1.out.w", "unet.attn2.out.w", "unet.out.conv.w"] {
            let t = unet_store.get(name).unwrap();
            let mx = t.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            eprintln!("DEBUG {name}: absmax {mx:e}");
        }

        let mut models = EditModels::load_split(&scaled, &emb.checkpoint, &joint.checkpoint, &joint.checkpoint, &ae.checkpoint, &diff.checkpoint).unwrap();
        let s = test_split.load(0).unwrap();
        let req = EditRequest {
            i_src: s.i_src,
            t_raw: s.t_raw.clone(),
            mask: Some(s.mask),
            seed: child_seed(a.seed, StreamKind::Data, test_split.entries[0].id as u64),
            use_t_opt: true,
            use_v_insight: false,
            steps: scaled.diffusion.timesteps,
        };
        let base = edit(&models, &req).unwrap();
        eprintln!("DEBUG base caption: {:?}", base.t_opt.as_ref().map(|t| t.caption()));
        let mut rng = Rng::stream(req.seed, StreamKind::Init, 99);
        perturb_store(&mut models.insight_store, &mut rng);
        perturb_store(&mut models.instruction_store, &mut rng);
        match edit(&models, &req) {
            Ok(out) => {
                eprintln!("DEBUG perturbed caption: {:?}", out.t_opt.as_ref().map(|t| t.caption()));
                let d: f32 = out.image.data.iter().zip(&base.image.data).map(|(a, b)| (a - b).abs()).sum();
                eprintln!("DEBUG image L1 diff: {d:e}, identical: {}", out.image.data == base.image.data);
            }
            Err(e) => eprintln!("DEBUG perturbed edit failed: {e}"),
        }
    }

    #[test]
    fn six_rows_with_table_2_shape_probes_and_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        let report = run_ablation(&cfg, dir.path()).unwrap();

        assert_eq!(report.rows.len(), 6);
        for (row, (exp, t_src, v_src)) in report.rows.iter().zip(ROWS) {
            assert_eq!(row.exp, exp);
            assert_eq!(row.t_opt_source, t_src);
            assert_eq!(row.v_insight_source, v_src);
            assert_eq!(row.use_t_opt, t_src != Source::Off);
            assert_eq!(row.use_v_insight, v_src != Source::Off);
            assert!(row.metrics.is_some(), "row #{} failed: {:?}", row.exp, row.error);
        }
        // Rows #1 and #2 use exactly one conditioning signal each.
        assert!(report.rows[0].use_t_opt && !report.rows[0].use_v_insight);
        assert!(!report.rows[1].use_t_opt && report.rows[1].use_v_insight);
        assert_eq!(report.probes.len(), 4);
        assert!(report.probes[0].contains("bit-identical"));
        assert_eq!(report.soft_checks.len(), 4);
        assert!(report.copy_source.is_some());
        for stage in [
            "embedder",
            "autoencoder",
            "instruction-joint",
            "instruction-text-only",
            "instruction-vision-only",
            "diffusion",
        ] {
            assert_eq!(report.checkpoints[stage].len(), 64, "missing hash for {stage}");
        }
        assert!(report.wall_clock_secs > 0.0);

        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: AblationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows.len(), 6);
        let text = report.table();
        assert!(text.contains("#1") && text.contains("#6"));
        assert!(text.contains("src_t") && text.contains("copy-source baseline"));
        assert!(text.contains("stand-ins"));
        let m6 = report.rows[5].metrics.unwrap();
        assert!(m6.psnr.is_finite() && m6.ssim <= 1.0 + 1e-6);

        // Failure containment: with the text-only variant gone, exactly the
        // rows that source a signal from it (#3, #5) fail; the rest still
        // evaluate. Reuses the checkpoints the run above left on disk.
        let mut scaled = cfg.clone();
        scaled.embedder.epochs = cfg.ablation.embedder_epochs;
        scaled.autoencoder.epochs = cfg.ablation.autoencoder_epochs;
        scaled.mml.epochs = cfg.ablation.mml_epochs;
        scaled.diffusion.epochs = cfg.ablation.diffusion_epochs;
        let summary = |stem: &str| -> TrainSummary {
            let path = dir.path().join(format!("{stem}.ckpt"));
            let (_, hash) = crate::checkpoint::load(&path).unwrap();
            TrainSummary {
                steps: 1,
                epochs: 1,
                first_epoch_loss: 0.0,
                last_epoch_loss: 0.0,
                checkpoint: path,
                hash,
                warnings: vec![],
            }
        };
        let emb = summary("embedder");
        let ae = summary("autoencoder");
        let joint = summary("mml-joint");
        let vision_only = Ok(summary("mml-vision-only"));
        let diff = summary("diffusion");
        let paths = StagePaths {
            embedder: &emb.checkpoint,
            autoencoder: &ae.checkpoint,
            diffusion: &diff.checkpoint,
        };
        let test_split =
            read_split(&dir.path().join("data").join("test")).unwrap();
        let text_only: Result<TrainSummary> = Err(Error::io("checkpoint vanished"));
        let (rows, baseline) = build_rows(
            &scaled,
            &paths,
            &joint,
            &text_only,
            &vision_only,
            &test_split,
            cfg.eval.use_mask,
            cfg.ablation.seed,
        );
        let failed: Vec<u32> =
            rows.iter().filter(|r| r.error.is_some()).map(|r| r.exp).collect();
        assert_eq!(failed, vec![3, 5]);
        for r in &rows {
            if r.error.is_none() {
                assert!(r.metrics.is_some());
            } else {
                assert!(r.error.as_ref().unwrap().contains("unavailable"));
            }
        }
        assert!(baseline.is_some());
        // Surviving rows reproduce the full run bit-for-bit: same
        // checkpoints, same per-item seeds.
        for (partial, full) in rows.iter().zip(&report.rows) {
            if partial.error.is_none() {
                assert_eq!(partial.metrics, full.metrics, "row #{}", partial.exp);
            }
        }
    }
}
