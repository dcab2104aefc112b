//! Multi-arm studies: the ablation ladder, the motion-bias measurement,
//! and the dense-versus-global training comparison.
//!
//! A study builds one [`StudyContext`] (world, SFT model, unlabeled pairs)
//! per seed and trains one model per arm. All arms of a study share the
//! context, so differences between arm metrics come from labels and
//! training alone.

use crate::dpo::{dpo_train, implicit_accuracy, DpoVariant};
use crate::error::{Error, Result};
use crate::harness::config::{Annotator, RunConfig};
use crate::harness::stages::{
    annotate_pairs, build_pairs, build_world, dense_relabel, eval_rows, fit_sft,
    flip_pair_labels, global_labeled, majority_pairs, summarize, Dataset,
    EvalSummary,
};
use crate::harness::{derive_seed, write_lines};
use crate::net::VelocityNet;
use crate::preference::{oracle_global, PreferencePair};
use crate::world::dynamic_degree;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Flip,
    Quantity,
    SegmentLength,
    MajorityVote,
    NewGt,
}

impl Study {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "flip" => Ok(Study::Flip),
            "quantity" => Ok(Study::Quantity),
            "segment_length" => Ok(Study::SegmentLength),
            "majority_vote" => Ok(Study::MajorityVote),
            "new_gt" => Ok(Study::NewGt),
            other => Err(Error::Config(format!(
                "unknown study '{other}' (flip|quantity|segment_length|majority_vote|new_gt)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Study::Flip => "flip",
            Study::Quantity => "quantity",
            Study::SegmentLength => "segment_length",
            Study::MajorityVote => "majority_vote",
            Study::NewGt => "new_gt",
        }
    }
}

pub struct StudyContext {
    pub data: Dataset,
    pub sft: VelocityNet,
    /// Unlabeled pairs, artifact injection already applied.
    pub raw_pairs: Vec<PreferencePair>,
}

/// World + SFT + pairs for one seed. `pair_count` overrides the configured
/// pair count (the quantity study needs headroom).
pub fn build_context(cfg: &RunConfig, pair_count: Option<usize>) -> Result<StudyContext> {
    let data = build_world(cfg)?;
    let (sft, _, _) = fit_sft(cfg, &data)?;
    let mut pair_cfg = cfg.clone();
    if let Some(n) = pair_count {
        pair_cfg.pairs.count = n;
    }
    let raw_pairs = build_pairs(&pair_cfg, &data, &sft)?;
    Ok(StudyContext {
        data,
        sft,
        raw_pairs,
    })
}

/// Dense-annotate the context pairs with the configured oracle settings.
pub fn dense_labeled(cfg: &RunConfig, ctx: &StudyContext) -> Result<Vec<PreferencePair>> {
    let mut acfg = cfg.clone();
    acfg.annotate.annotator = Annotator::OracleDense;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "annotate"));
    Ok(annotate_pairs(&acfg, ctx.raw_pairs.clone(), &ctx.data, &mut rng)?.pairs)
}

/// One DPO arm: train from the shared SFT model and evaluate on holdout.
pub fn train_arm(
    cfg: &RunConfig,
    ctx: &StudyContext,
    variant: DpoVariant,
    pairs: &[PreferencePair],
    tag: &str,
) -> Result<(VelocityNet, EvalSummary)> {
    let mut dcfg = cfg.dpo.clone();
    dcfg.variant = variant;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, &format!("dpo/{tag}")));
    let out = dpo_train(&dcfg, pairs, &ctx.sft, &mut rng)?;
    if let Some(step) = out.diverged_at {
        return Err(Error::NonFinite(format!("arm {tag} diverged at step {step}")));
    }
    let summary = eval_net(cfg, ctx, &out.net)?;
    Ok((out.net, summary))
}

pub fn eval_net(cfg: &RunConfig, ctx: &StudyContext, net: &VelocityNet) -> Result<EvalSummary> {
    let rows = eval_rows(
        net,
        &ctx.data.holdout,
        cfg.world.seg_frames,
        cfg.eval.n_steps,
        cfg.eval.samples_per_item,
        derive_seed(cfg.seed, "eval"),
    )?;
    Ok(summarize(&rows))
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    pub summary: EvalSummary,
    /// Implicit accuracy against the clean labels, when the study tracks it.
    pub implicit_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub study: &'static str,
    pub baseline: EvalSummary,
    pub arms: Vec<ArmResult>,
}

impl StudyReport {
    pub fn csv_lines(&self) -> Vec<String> {
        let mut lines = vec![
            "arm,toy_segment_error,toy_temporal_error,toy_dynamic_degree,implicit_accuracy"
                .to_string(),
        ];
        lines.push(format!(
            "sft_baseline,{},{},{},",
            self.baseline.toy_segment_error,
            self.baseline.toy_temporal_error,
            self.baseline.toy_dynamic_degree
        ));
        for arm in &self.arms {
            lines.push(format!(
                "{},{},{},{},{}",
                arm.name,
                arm.summary.toy_segment_error,
                arm.summary.toy_temporal_error,
                arm.summary.toy_dynamic_degree,
                arm.implicit_accuracy
                    .map(|a| a.to_string())
                    .unwrap_or_default()
            ));
        }
        lines
    }
}

pub fn run_study(cfg: &RunConfig, study: Study) -> Result<StudyReport> {
    match study {
        Study::Flip => run_flip(cfg),
        Study::Quantity => run_quantity(cfg),
        Study::SegmentLength => run_segment_length(cfg),
        Study::MajorityVote => run_majority_vote(cfg),
        Study::NewGt => run_new_gt(cfg),
    }
}

/// Clean-label accuracy of a trained arm over the training pairs.
fn accuracy_vs_clean(
    cfg: &RunConfig,
    ctx: &StudyContext,
    net: &VelocityNet,
    clean: &[PreferencePair],
) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "accuracy"));
    implicit_accuracy(net, &ctx.sft, clean, cfg.eval.accuracy_draws, &mut rng)
}

fn run_flip(cfg: &RunConfig) -> Result<StudyReport> {
    let ctx = build_context(cfg, None)?;
    let clean = dense_labeled(cfg, &ctx)?;
    let baseline = eval_net(cfg, &ctx, &ctx.sft)?;
    let mut arms = Vec::new();
    for &p in &cfg.ablate.flip_rates {
        let pairs = if p > 0.0 {
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, &format!("flip/{p}")));
            flip_pair_labels(&clean, p, &mut rng)
        } else {
            clean.clone()
        };
        // all flip arms share one training stream, so label damage is the
        // only difference between them
        let (net, summary) = train_arm(cfg, &ctx, DpoVariant::Dense, &pairs, "flip")?;
        let acc = accuracy_vs_clean(cfg, &ctx, &net, &clean)?;
        arms.push(ArmResult {
            name: format!("flip_{p}"),
            summary,
            implicit_accuracy: Some(acc),
        });
    }
    Ok(StudyReport {
        study: Study::Flip.name(),
        baseline,
        arms,
    })
}

fn run_quantity(cfg: &RunConfig) -> Result<StudyReport> {
    let max_factor = cfg
        .ablate
        .quantity_factors
        .iter()
        .cloned()
        .fold(1.0f64, f64::max);
    let max_pairs = (cfg.pairs.count as f64 * max_factor).ceil() as usize;
    let ctx = build_context(cfg, Some(max_pairs))?;
    let clean = dense_labeled(cfg, &ctx)?;
    let baseline = eval_net(cfg, &ctx, &ctx.sft)?;
    let mut arms = Vec::new();
    for &f in &cfg.ablate.quantity_factors {
        let take = ((cfg.pairs.count as f64 * f).round() as usize).min(clean.len());
        let subset = &clean[..take.max(1)];
        let (net, summary) = train_arm(cfg, &ctx, DpoVariant::Dense, subset, "quantity")?;
        let acc = accuracy_vs_clean(cfg, &ctx, &net, &clean)?;
        arms.push(ArmResult {
            name: format!("quantity_{f}x"),
            summary,
            implicit_accuracy: Some(acc),
        });
    }
    Ok(StudyReport {
        study: Study::Quantity.name(),
        baseline,
        arms,
    })
}

fn run_segment_length(cfg: &RunConfig) -> Result<StudyReport> {
    let ctx = build_context(cfg, None)?;
    let baseline = eval_net(cfg, &ctx, &ctx.sft)?;
    let mut arms = Vec::new();
    for &s in &cfg.ablate.seg_lengths {
        if s == 0 || s > cfg.world.t_len {
            return Err(Error::Config(format!("segment length {s} out of range")));
        }
        let pairs = dense_relabel(cfg, &ctx.raw_pairs, &ctx.data, s)?;
        let mut arm_cfg = cfg.clone();
        arm_cfg.world.seg_frames = s;
        let (net, summary) = train_arm(&arm_cfg, &ctx, DpoVariant::Dense, &pairs, "seg")?;
        let acc = accuracy_vs_clean(cfg, &ctx, &net, &pairs)?;
        arms.push(ArmResult {
            name: format!("seg_{s}"),
            summary,
            implicit_accuracy: Some(acc),
        });
    }
    Ok(StudyReport {
        study: Study::SegmentLength.name(),
        baseline,
        arms,
    })
}

fn run_majority_vote(cfg: &RunConfig) -> Result<StudyReport> {
    let ctx = build_context(cfg, None)?;
    let clean = dense_labeled(cfg, &ctx)?;
    let baseline = eval_net(cfg, &ctx, &ctx.sft)?;

    let voted = majority_pairs(&clean);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "global-labels"));
    let direct = global_labeled(cfg, &clean, &ctx.data, &mut rng)?;

    let (_, voted_summary) = train_arm(cfg, &ctx, DpoVariant::Structural, &voted, "agg")?;
    let (_, direct_summary) = train_arm(cfg, &ctx, DpoVariant::Structural, &direct, "agg")?;
    Ok(StudyReport {
        study: Study::MajorityVote.name(),
        baseline,
        arms: vec![
            ArmResult {
                name: "majority_voted".into(),
                summary: voted_summary,
                implicit_accuracy: None,
            },
            ArmResult {
                name: "global_direct".into(),
                summary: direct_summary,
                implicit_accuracy: None,
            },
        ],
    })
}

fn run_new_gt(cfg: &RunConfig) -> Result<StudyReport> {
    let ctx = build_context(cfg, None)?;
    let clean = dense_labeled(cfg, &ctx)?;
    let baseline = eval_net(cfg, &ctx, &ctx.sft)?;
    let (_, base_summary) = train_arm(cfg, &ctx, DpoVariant::Dense, &clean, "gt-base")?;

    // a disjoint guidance set: same lattice, fresh draw, same SFT model
    let mut new_cfg = cfg.clone();
    new_cfg.seed = derive_seed(cfg.seed, "new-gt");
    let new_data = build_world(&new_cfg)?;
    let new_raw = build_pairs(&new_cfg, &new_data, &ctx.sft)?;
    let new_ctx = StudyContext {
        data: new_data,
        sft: ctx.sft.clone(),
        raw_pairs: new_raw,
    };
    let new_clean = dense_labeled(&new_cfg, &new_ctx)?;
    let mut eval_cfg = new_cfg.clone();
    eval_cfg.seed = cfg.seed; // evaluate on the original holdout seeds
    let (net, _) = train_arm(&new_cfg, &new_ctx, DpoVariant::Dense, &new_clean, "gt-new")?;
    let new_summary = eval_net(&eval_cfg, &ctx, &net)?;

    Ok(StudyReport {
        study: Study::NewGt.name(),
        baseline,
        arms: vec![
            ArmResult {
                name: "gt_base".into(),
                summary: base_summary,
                implicit_accuracy: None,
            },
            ArmResult {
                name: "gt_new".into(),
                summary: new_summary,
                implicit_accuracy: None,
            },
        ],
    })
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, study: Study) -> Result<crate::harness::RunManifest> {
    let started = std::time::Instant::now();
    std::fs::create_dir_all(out)?;
    let report = run_study(cfg, study)?;
    let file = format!("ablate_{}.csv", report.study);
    write_lines(out.join(&file), &report.csv_lines())?;
    crate::harness::RunManifest::record(
        cfg,
        &format!("ablate-{}", report.study),
        out,
        &[&file],
        started,
    )
}

// ---------------------------------------------------------------------------
// motion-bias study

#[derive(Debug, Clone, Copy)]
pub struct BiasGap {
    /// Mean dynamic-degree gap, loser minus winner.
    pub gap: f64,
    /// One-sided p-value for gap > 0.
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BiasStudy {
    pub vanilla: BiasGap,
    pub guided: BiasGap,
}

/// Paired one-sided t-test of mean(diffs) > 0.
pub fn one_sided_p(diffs: &[f64]) -> BiasGap {
    let n = diffs.len();
    if n < 2 {
        return BiasGap {
            gap: diffs.first().copied().unwrap_or(0.0),
            p_value: 1.0,
            n,
        };
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return BiasGap {
            gap: mean,
            p_value: if mean > 0.0 { 0.0 } else { 1.0 },
            n,
        };
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    BiasGap {
        gap: mean,
        p_value: 1.0 - dist.cdf(t),
        n,
    }
}

/// Compare the winner-loser motion gap of an annotation study built from
/// independently sampled clips against one built from guided pairs.
///
/// The independent arm mirrors a raw annotation batch: two clips sampled
/// from different corpus entries, each judged against its own ground
/// truth, so the pair can straddle motion strata the way real comparison
/// batches do. The guided arm anchors both clips to one ground truth, so
/// the pair shares its motion by construction. Both arms run the same
/// artifact process (severity grows with each clip's own motion through
/// `pairs.artifacts.bias_coeff`) and the same motion-weighted annotator
/// (`annotate.lambda_bias`). Ties are skipped.
pub fn motion_bias_study(
    cfg: &RunConfig,
    ctx: &StudyContext,
    n_pairs: usize,
) -> Result<BiasStudy> {
    let art = &cfg.pairs.artifacts;
    if art.severities.is_empty() {
        return Err(Error::Config("bias study needs artifact severities".into()));
    }
    let scfg = crate::flow::SamplerConfig::new(cfg.pairs.n_steps)?;
    let shape = [cfg.world.t_len, cfg.world.d_len];
    let n_train = ctx.data.train.len();

    let corrupt = |clip: &crate::world::MicroVideo,
                   rng: &mut ChaCha12Rng|
     -> Result<crate::world::MicroVideo> {
        let n_segs = crate::preference::segment_bounds(clip.rows(), cfg.world.seg_frames)?.len();
        let seg = rng.gen_range(0..n_segs);
        let base = art.severities[rng.gen_range(0..art.severities.len())];
        let event = crate::world::ArtifactEvent {
            start_frame: seg * cfg.world.seg_frames,
            end_frame: ((seg + 1) * cfg.world.seg_frames).min(clip.rows()),
            severity: base * (1.0 + art.bias_coeff * dynamic_degree(clip)),
            kind: art.kind,
        };
        crate::world::inject_artifact(clip, &event, rng)
    };

    // margin from one shared pool of corrupted-clip segment errors
    let mut pool_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "bias/margin"));
    let mut pool = Vec::new();
    for i in 0..64.min(n_train) {
        let it = &ctx.data.train[i];
        let clip = crate::flow::euler_sample(&ctx.sft, &it.cond, &shape, &scfg, &mut pool_rng)?;
        let clip = corrupt(&clip, &mut pool_rng)?;
        pool.extend(crate::preference::segment_errors(
            &clip,
            &it.video,
            cfg.world.seg_frames,
        )?);
    }
    let tau_g = crate::preference::margin_from_errors(pool, cfg.annotate.tau_global_frac);

    // independent arm: cross-corpus comparisons, each clip scored against
    // its own ground truth
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "bias/vanilla"));
    let mut vanilla_diffs = Vec::new();
    for _ in 0..n_pairs {
        let a = &ctx.data.train[rng.gen_range(0..n_train)];
        let b = &ctx.data.train[rng.gen_range(0..n_train)];
        let xa = corrupt(
            &crate::flow::euler_sample(&ctx.sft, &a.cond, &shape, &scfg, &mut rng)?,
            &mut rng,
        )?;
        let xb = corrupt(
            &crate::flow::euler_sample(&ctx.sft, &b.cond, &shape, &scfg, &mut rng)?,
            &mut rng,
        )?;
        let sa = crate::preference::clip_quality_score(&xa, &a.video, cfg.annotate.lambda_bias)?;
        let sb = crate::preference::clip_quality_score(&xb, &b.video, cfg.annotate.lambda_bias)?;
        if (sa - sb).abs() <= tau_g {
            continue;
        }
        let (win, lose) = if sa > sb { (&xa, &xb) } else { (&xb, &xa) };
        vanilla_diffs.push(dynamic_degree(lose) - dynamic_degree(win));
    }

    // guided arm: both clips denoised from the same partially noised
    // ground truth, judged by the whole-clip oracle
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "bias/guided"));
    let mut guided_diffs = Vec::new();
    for i in 0..n_pairs {
        let item = &ctx.data.train[i % n_train];
        let eta = cfg.pairs.eta_min + (cfg.pairs.eta_max - cfg.pairs.eta_min) * rng.gen::<f64>();
        let (g0, g1) =
            crate::flow::guided_pair(&ctx.sft, &item.cond, &item.video, eta, &scfg, &mut rng)?;
        let c0 = corrupt(&g0, &mut rng)?;
        let c1 = corrupt(&g1, &mut rng)?;
        let label = oracle_global(&c0, &c1, &item.video, cfg.annotate.lambda_bias, tau_g)?;
        let sign = label.sign();
        if sign == 0 {
            continue;
        }
        let (win, lose) = if sign > 0 { (&c0, &c1) } else { (&c1, &c0) };
        guided_diffs.push(dynamic_degree(lose) - dynamic_degree(win));
    }

    Ok(BiasStudy {
        vanilla: one_sided_p(&vanilla_diffs),
        guided: one_sided_p(&guided_diffs),
    })
}
