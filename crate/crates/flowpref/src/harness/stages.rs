//! Pipeline stages behind the CLI subcommands.
//!
//! Each stage is a pure function of (config, out_dir): it reads its inputs
//! from the out directory by fixed file names, writes its outputs there,
//! and records a [`RunManifest`] listing every produced file with its
//! content hash. Re-running a stage with the same config reproduces the
//! same hashes.

use crate::checkpoint;
use crate::dominance::{dominance_sweep, DominanceRow, SweepSettings};
use crate::dpo::{dpo_train, DpoVariant, TrainRecord};
use crate::error::{Error, Result};
use crate::flow::{
    euler_sample, flow_batch_loss, guided_pair, train_flow_matching, vanilla_pair, LogitNormal,
    SamplerConfig,
};
use crate::harness::config::{Annotator, ArtifactConfig, PairMode, RunConfig};
use crate::harness::{derive_seed, sha256_file, write_lines, RunManifest};
use crate::net::{Denoiser, VelocityNet};
use crate::preference::{
    annotate_dense, export_labels, filter_pairs, flip_dense, flip_global, import_labels,
    margin_from_errors, oracle_global, remove_tie_pairs, segment_bounds, segment_errors,
    PreferencePair, Provenance,
};
use crate::tensor::Tensor;
use crate::world::{
    dynamic_degree, inject_artifact, make_condition, make_dataset, render_video, ArtifactEvent,
    DatasetItem, MicroVideo, TrajectorySpec,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DATASET_JSON: &str = "dataset.json";
pub const DATASET_BLOCKS: &str = "dataset.fplb";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const SFT_METRICS: &str = "sft_metrics.csv";
pub const SFT_SUMMARY: &str = "sft_summary.json";
pub const PAIRS_JSON: &str = "pairs.json";
pub const PAIRS_BLOCKS: &str = "pairs.fplb";
pub const LABELS_JSONL: &str = "labels.jsonl";
pub const ANNOTATE_STATS: &str = "annotate_stats.csv";
pub const DPO_CKPT: &str = "dpo.ckpt";
pub const DPO_METRICS: &str = "dpo_metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const DOMINANCE_CSV: &str = "dominance.csv";
pub const PROBE_MANIFEST: &str = "probe_manifest.json";

pub const EVAL_HEADER: &str = "spec_id,toy_segment_error,toy_temporal_error,toy_dynamic_degree";

// ---------------------------------------------------------------------------
// dataset files

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetFile {
    seed: u64,
    t_len: usize,
    d_len: usize,
    items: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetEntry {
    id: usize,
    stratum: usize,
    /// "train" or "holdout"
    split: String,
    spec: TrajectorySpec,
}

/// In-memory view of the generated world.
pub struct Dataset {
    pub train: Vec<DatasetItem>,
    pub holdout: Vec<DatasetItem>,
}

impl Dataset {
    pub fn find(&self, id: usize) -> Option<&DatasetItem> {
        self.train
            .iter()
            .chain(self.holdout.iter())
            .find(|it| it.id == id)
    }
}

/// Generate the world in memory: stratified dataset split into train and
/// holdout.
pub fn build_world(cfg: &RunConfig) -> Result<Dataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "gen-data"));
    let total = cfg.sft.dataset_size + cfg.sft.holdout_size;
    let mut items = make_dataset(
        &cfg.world.lattice,
        total,
        &cfg.world.strata_weights,
        cfg.world.t_len,
        cfg.world.d_len,
        &mut rng,
    )?;
    let holdout = items.split_off(cfg.sft.dataset_size.min(items.len()));
    Ok(Dataset {
        train: items,
        holdout,
    })
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    std::fs::create_dir_all(out)?;
    let data = build_world(cfg)?;

    let mut entries = Vec::new();
    let mut blocks = Vec::new();
    for (split, items) in [("train", &data.train), ("holdout", &data.holdout)] {
        for it in items {
            entries.push(DatasetEntry {
                id: it.id,
                stratum: it.stratum,
                split: split.into(),
                spec: it.spec,
            });
            blocks.push((format!("video/{:05}", it.id), it.video.clone()));
        }
    }
    let file = DatasetFile {
        seed: cfg.seed,
        t_len: cfg.world.t_len,
        d_len: cfg.world.d_len,
        items: entries,
    };
    std::fs::write(out.join(DATASET_JSON), serde_json::to_string_pretty(&file)?)?;
    checkpoint::write_tensors(out.join(DATASET_BLOCKS), &blocks)?;

    RunManifest::record(cfg, "gen-data", out, &[DATASET_JSON, DATASET_BLOCKS], started)
}

pub fn load_dataset(_cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(out.join(DATASET_JSON))
        .map_err(|e| Error::Config(format!("missing {DATASET_JSON} in {}: {e}", out.display())))?;
    let file: DatasetFile = serde_json::from_str(&text)?;
    let blocks = checkpoint::read_tensors(out.join(DATASET_BLOCKS))?;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for e in file.items {
        let name = format!("video/{:05}", e.id);
        let video = blocks
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("dataset block {name} missing")))?;
        let item = DatasetItem {
            id: e.id,
            stratum: e.stratum,
            cond: make_condition(&e.spec),
            spec: e.spec,
            video,
        };
        if e.split == "train" {
            train.push(item);
        } else {
            holdout.push(item);
        }
    }
    Ok(Dataset { train, holdout })
}

// ---------------------------------------------------------------------------
// SFT

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftSummary {
    pub holdout_loss_init: f64,
    pub holdout_loss_final: f64,
    pub steps: u64,
}

/// Supervised fit of the velocity net on the training split.
pub fn fit_sft(
    cfg: &RunConfig,
    data: &Dataset,
) -> Result<(VelocityNet, SftSummary, Vec<crate::flow::SftRecord>)> {
    let init = VelocityNet::init(cfg.net_config(), derive_seed(cfg.seed, "init"))?;
    let items: Vec<(Tensor, Tensor)> = data
        .train
        .iter()
        .map(|it| (it.video.clone(), it.cond.clone()))
        .collect();
    let holdout_refs: Vec<(&Tensor, &Tensor)> =
        data.holdout.iter().map(|it| (&it.video, &it.cond)).collect();

    let eval_loss = |net: &VelocityNet| -> Result<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "sft-holdout"));
        flow_batch_loss(net, &holdout_refs, &LogitNormal::default(), &mut rng)
    };
    let loss_init = eval_loss(&init)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "train-sft"));
    let (net, records) = train_flow_matching(&init, &items, &cfg.sft.fit, &mut rng)?;
    let loss_final = eval_loss(&net)?;
    let summary = SftSummary {
        holdout_loss_init: loss_init,
        holdout_loss_final: loss_final,
        steps: cfg.sft.fit.steps,
    };
    Ok((net, summary, records))
}

pub fn cmd_train_sft(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let data = load_dataset(cfg, out)?;
    let (net, summary, records) = fit_sft(cfg, &data)?;

    net.save(out.join(SFT_CKPT))?;
    let mut lines = vec![crate::flow::SftRecord::csv_header().to_string()];
    lines.extend(records.iter().map(|r| r.csv_row()));
    write_lines(out.join(SFT_METRICS), &lines)?;
    std::fs::write(out.join(SFT_SUMMARY), serde_json::to_string_pretty(&summary)?)?;

    RunManifest::record(
        cfg,
        "train-sft",
        out,
        &[SFT_CKPT, SFT_METRICS, SFT_SUMMARY],
        started,
    )
}

// ---------------------------------------------------------------------------
// pair generation

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairsFile {
    mode: PairMode,
    n_steps: usize,
    seed: u64,
    items: Vec<PairEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairEntry {
    pair_id: String,
    spec_id: usize,
    /// "vanilla" or "guided"; guided pairs are aligned with their spec's
    /// ground truth.
    provenance: String,
    /// None for vanilla pairs.
    eta: Option<f64>,
    /// Artifact events injected into each side.
    injected0: Vec<ArtifactEvent>,
    injected1: Vec<ArtifactEvent>,
}

/// Generate one pair for an item, with optional artifact injection.
/// Returns the two clips plus the events applied to each.
#[allow(clippy::type_complexity)]
pub fn generate_pair<R: Rng>(
    net: &impl Denoiser,
    item: &DatasetItem,
    mode: PairMode,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<(MicroVideo, MicroVideo, Option<f64>, Vec<ArtifactEvent>, Vec<ArtifactEvent>)> {
    let scfg = SamplerConfig::new(cfg.pairs.n_steps)?;
    let shape = [cfg.world.t_len, cfg.world.d_len];
    let (x0, x1, eta) = match mode {
        PairMode::Vanilla => {
            let (a, b) = vanilla_pair(net, &item.cond, &shape, &scfg, rng)?;
            (a, b, None)
        }
        PairMode::Guided => {
            let eta = cfg.pairs.eta_min + (cfg.pairs.eta_max - cfg.pairs.eta_min) * rng.gen::<f64>();
            let (a, b) = guided_pair(net, &item.cond, &item.video, eta, &scfg, rng)?;
            (a, b, Some(eta))
        }
    };
    let (x0, ev0, x1, ev1) = apply_artifacts(&cfg.pairs.artifacts, cfg.world.seg_frames, x0, x1, rng)?;
    Ok((x0, x1, eta, ev0, ev1))
}

/// Inject configured artifacts. Severity couples to each clip's own motion
/// through `bias_coeff`, which is the controllable motion-bias mechanism.
#[allow(clippy::type_complexity)]
fn apply_artifacts<R: Rng>(
    art: &ArtifactConfig,
    seg_frames: usize,
    x0: MicroVideo,
    x1: MicroVideo,
    rng: &mut R,
) -> Result<(MicroVideo, Vec<ArtifactEvent>, MicroVideo, Vec<ArtifactEvent>)> {
    if art.prob <= 0.0 || art.severities.is_empty() {
        return Ok((x0, Vec::new(), x1, Vec::new()));
    }
    let n_segs = segment_bounds(x0.rows(), seg_frames)?.len();
    let mut out = [(x0, Vec::new()), (x1, Vec::new())];
    if rng.gen_bool(art.prob) {
        let first = usize::from(rng.gen_bool(0.5));
        let seg_a = rng.gen_range(0..n_segs);
        inject_one(art, seg_frames, &mut out[first], seg_a, rng)?;
        if rng.gen_bool(art.both_prob) {
            let mut seg_b = rng.gen_range(0..n_segs);
            if n_segs > 1 {
                while seg_b == seg_a {
                    seg_b = rng.gen_range(0..n_segs);
                }
            }
            inject_one(art, seg_frames, &mut out[1 - first], seg_b, rng)?;
        }
    }
    let [(x0, ev0), (x1, ev1)] = out;
    Ok((x0, ev0, x1, ev1))
}

fn inject_one<R: Rng>(
    art: &ArtifactConfig,
    seg_frames: usize,
    slot: &mut (MicroVideo, Vec<ArtifactEvent>),
    seg: usize,
    rng: &mut R,
) -> Result<()> {
    let base = art.severities[rng.gen_range(0..art.severities.len())];
    let severity = base * (1.0 + art.bias_coeff * dynamic_degree(&slot.0));
    let event = ArtifactEvent {
        start_frame: seg * seg_frames,
        end_frame: ((seg + 1) * seg_frames).min(slot.0.rows()),
        severity,
        kind: art.kind,
    };
    slot.0 = inject_artifact(&slot.0, &event, rng)?;
    slot.1.push(event);
    Ok(())
}

/// Generate the configured number of pairs in memory: one pair per train
/// item, cycling, with artifact injection per config.
pub fn build_pairs(
    cfg: &RunConfig,
    data: &Dataset,
    net: &VelocityNet,
) -> Result<Vec<PreferencePair>> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "gen-pairs"));
    let mut pairs = Vec::with_capacity(cfg.pairs.count);
    for i in 0..cfg.pairs.count {
        let item = &data.train[i % data.train.len()];
        let (x0, x1, eta, _, _) = generate_pair(net, item, cfg.pairs.mode, cfg, &mut rng)?;
        pairs.push(PreferencePair {
            id: format!("p{i:05}"),
            spec_id: item.id,
            cond: item.cond.clone(),
            x0,
            x1,
            provenance: match eta {
                Some(eta) => Provenance::Guided { eta },
                None => Provenance::Vanilla,
            },
            global: None,
            dense: None,
        });
    }
    Ok(pairs)
}

pub fn cmd_gen_pairs(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let data = load_dataset(cfg, out)?;
    let net = VelocityNet::load(out.join(SFT_CKPT))?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "gen-pairs"));

    let mut entries = Vec::with_capacity(cfg.pairs.count);
    let mut blocks = Vec::with_capacity(cfg.pairs.count * 2);
    for i in 0..cfg.pairs.count {
        let item = &data.train[i % data.train.len()];
        let (x0, x1, eta, ev0, ev1) = generate_pair(&net, item, cfg.pairs.mode, cfg, &mut rng)?;
        let pair_id = format!("p{i:05}");
        blocks.push((format!("x0/{pair_id}"), x0));
        blocks.push((format!("x1/{pair_id}"), x1));
        entries.push(PairEntry {
            pair_id,
            spec_id: item.id,
            provenance: match eta {
                Some(_) => "guided".into(),
                None => "vanilla".into(),
            },
            eta,
            injected0: ev0,
            injected1: ev1,
        });
    }
    let file = PairsFile {
        mode: cfg.pairs.mode,
        n_steps: cfg.pairs.n_steps,
        seed: cfg.seed,
        items: entries,
    };
    std::fs::write(out.join(PAIRS_JSON), serde_json::to_string_pretty(&file)?)?;
    checkpoint::write_tensors(out.join(PAIRS_BLOCKS), &blocks)?;

    RunManifest::record(cfg, "gen-pairs", out, &[PAIRS_JSON, PAIRS_BLOCKS], started)
}

pub fn load_pairs(cfg: &RunConfig, out: &Path) -> Result<(PairMode, Vec<PreferencePair>)> {
    let text = std::fs::read_to_string(out.join(PAIRS_JSON))
        .map_err(|e| Error::Config(format!("missing {PAIRS_JSON} in {}: {e}", out.display())))?;
    let file: PairsFile = serde_json::from_str(&text)?;
    let blocks = checkpoint::read_tensors(out.join(PAIRS_BLOCKS))?;
    let data = load_dataset(cfg, out)?;
    let mut pairs = Vec::with_capacity(file.items.len());
    for e in &file.items {
        let get = |prefix: &str| -> Result<Tensor> {
            let name = format!("{prefix}/{}", e.pair_id);
            blocks
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("pair block {name} missing")))
        };
        let item = data
            .find(e.spec_id)
            .ok_or_else(|| Error::Config(format!("pair {} references unknown spec", e.pair_id)))?;
        pairs.push(PreferencePair {
            id: e.pair_id.clone(),
            spec_id: e.spec_id,
            cond: item.cond.clone(),
            x0: get("x0")?,
            x1: get("x1")?,
            provenance: match e.eta {
                Some(eta) => Provenance::Guided { eta },
                None => Provenance::Vanilla,
            },
            global: None,
            dense: None,
        });
    }
    Ok((file.mode, pairs))
}

// ---------------------------------------------------------------------------
// annotation

/// Tie margins derived from the data being annotated: `frac` times the
/// median per-segment error of all clips against their ground truth.
pub fn margins(
    pairs: &[PreferencePair],
    data: &Dataset,
    seg_frames: usize,
    tau_frac: f64,
    tau_global_frac: f64,
) -> Result<(f64, f64)> {
    let mut pool = Vec::new();
    for p in pairs {
        let gt = &data
            .find(p.spec_id)
            .ok_or_else(|| Error::Config(format!("pair {} has no ground truth", p.id)))?
            .video;
        pool.extend(segment_errors(&p.x0, gt, seg_frames)?);
        pool.extend(segment_errors(&p.x1, gt, seg_frames)?);
    }
    Ok((
        margin_from_errors(pool.clone(), tau_frac),
        margin_from_errors(pool, tau_global_frac),
    ))
}

pub struct AnnotateOutput {
    pub pairs: Vec<PreferencePair>,
    pub stats: Vec<(String, f64)>,
}

/// Annotate pairs in memory with the configured oracle, apply label
/// flipping, and filter. The returned stats become `annotate_stats.csv`.
pub fn annotate_pairs<R: Rng>(
    cfg: &RunConfig,
    mut pairs: Vec<PreferencePair>,
    data: &Dataset,
    rng: &mut R,
) -> Result<AnnotateOutput> {
    let a = &cfg.annotate;
    let total = pairs.len();
    let mut stats: Vec<(String, f64)> = vec![("n_pairs".into(), total as f64)];
    match a.annotator {
        Annotator::OracleDense => {
            if pairs.iter().any(|p| !p.provenance.is_guided()) {
                return Err(Error::Config(
                    "dense annotation requires guided pairs (vanilla pairs are not aligned)"
                        .into(),
                ));
            }
            let (tau, _) = margins(&pairs, data, cfg.world.seg_frames, a.tau_frac, a.tau_global_frac)?;
            stats.push(("tau".into(), tau));
            let mut nontie_sum = 0.0;
            for p in &mut pairs {
                let gt = &data.find(p.spec_id).expect("checked by margins").video;
                let mut label = annotate_dense(p, gt, cfg.world.seg_frames, tau)?;
                if a.flip_p > 0.0 {
                    label = flip_dense(&label, a.flip_p, rng);
                }
                nontie_sum += label.non_tie_fraction();
                p.dense = Some(label);
            }
            let mean_nontie = nontie_sum / total.max(1) as f64;
            stats.push(("mean_nontie_frac".into(), mean_nontie));
            stats.push(("tie_rate".into(), 1.0 - mean_nontie));
            let at_least_one = pairs
                .iter()
                .filter(|p| p.dense.as_ref().unwrap().non_tie_count() > 0)
                .count();
            stats.push((
                "frac_with_nontie".into(),
                at_least_one as f64 / total.max(1) as f64,
            ));
            let (kept, fstats) = filter_pairs(pairs, a.min_nontie_frac)?;
            stats.push(("retention".into(), fstats.retention));
            pairs = kept;
        }
        Annotator::OracleGlobal => {
            let (_, tau_g) = margins(&pairs, data, cfg.world.seg_frames, a.tau_frac, a.tau_global_frac)?;
            stats.push(("tau_global".into(), tau_g));
            let mut ties = 0usize;
            for p in &mut pairs {
                let gt = &data.find(p.spec_id).expect("checked by margins").video;
                let mut label = oracle_global(&p.x0, &p.x1, gt, a.lambda_bias, tau_g)?;
                if a.flip_p > 0.0 {
                    label = flip_global(label, a.flip_p, rng);
                }
                if label.is_tie() {
                    ties += 1;
                }
                p.global = Some(label);
            }
            stats.push(("tie_rate".into(), ties as f64 / total.max(1) as f64));
            pairs = remove_tie_pairs(pairs);
            stats.push(("retention".into(), pairs.len() as f64 / total.max(1) as f64));
        }
        Annotator::Import => {
            let path = a
                .import_path
                .as_ref()
                .ok_or_else(|| Error::Config("annotator=import needs import_path".into()))?;
            let istats = import_labels(&mut pairs, path)?;
            stats.push(("imported".into(), istats.applied as f64));
            stats.push(("unlabeled".into(), istats.unlabeled as f64));
        }
    }
    stats.push(("labeled_pairs".into(), pairs.len() as f64));
    Ok(AnnotateOutput { pairs, stats })
}

pub fn cmd_annotate(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let (_, pairs) = load_pairs(cfg, out)?;
    let data = load_dataset(cfg, out)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "annotate"));
    let output = annotate_pairs(cfg, pairs, &data, &mut rng)?;
    export_labels(&output.pairs, out.join(LABELS_JSONL))?;
    let mut lines = vec!["stat,value".to_string()];
    lines.extend(output.stats.iter().map(|(k, v)| format!("{k},{v}")));
    write_lines(out.join(ANNOTATE_STATS), &lines)?;
    RunManifest::record(cfg, "annotate", out, &[LABELS_JSONL, ANNOTATE_STATS], started)
}

// ---------------------------------------------------------------------------
// DPO training

pub fn cmd_train_dpo(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let (_, mut pairs) = load_pairs(cfg, out)?;
    import_labels(&mut pairs, out.join(LABELS_JSONL))?;
    // drop unlabeled or unusable pairs; the trainer validates the rest
    pairs.retain(|p| match cfg.dpo.variant {
        DpoVariant::Dense => p
            .dense
            .as_ref()
            .map(|d| d.non_tie_count() > 0)
            .unwrap_or(false),
        _ => p.global.map(|g| !g.is_tie()).unwrap_or(false),
    });
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no pairs usable for variant {:?}; annotate with matching labels first",
            cfg.dpo.variant
        )));
    }
    let init = VelocityNet::load(out.join(SFT_CKPT))?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "train-dpo"));
    let run = dpo_train(&cfg.dpo, &pairs, &init, &mut rng)?;

    run.net.save(out.join(DPO_CKPT))?;
    let mut lines = vec![TrainRecord::csv_header().to_string()];
    lines.extend(run.records.iter().map(|r| r.csv_row()));
    write_lines(out.join(DPO_METRICS), &lines)?;

    let manifest = RunManifest::record(cfg, "train-dpo", out, &[DPO_CKPT, DPO_METRICS], started)?;
    if let Some(step) = run.diverged_at {
        return Err(Error::NonFinite(format!(
            "training diverged at step {step}; last good checkpoint saved"
        )));
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub spec_id: usize,
    pub toy_segment_error: f64,
    pub toy_temporal_error: f64,
    pub toy_dynamic_degree: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub toy_segment_error: f64,
    pub toy_temporal_error: f64,
    pub toy_dynamic_degree: f64,
}

/// Sample clips per holdout item (seeded per item and draw) and measure
/// them against the ground truth: per-segment reconstruction error,
/// frame-delta mismatch, and motion strength. Multiple samples per item
/// are averaged into one row.
pub fn eval_rows(
    net: &impl Denoiser,
    items: &[DatasetItem],
    seg_frames: usize,
    n_steps: usize,
    samples_per_item: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let scfg = SamplerConfig::new(n_steps)?;
    let draws = samples_per_item.max(1);
    let mut rows = Vec::with_capacity(items.len());
    for it in items {
        let mut row = EvalRow {
            spec_id: it.id,
            toy_segment_error: 0.0,
            toy_temporal_error: 0.0,
            toy_dynamic_degree: 0.0,
        };
        for k in 0..draws {
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("eval/{}/{k}", it.id)));
            let shape = [it.video.rows(), it.video.cols()];
            let sample = euler_sample(net, &it.cond, &shape, &scfg, &mut rng)?;
            let errs = segment_errors(&sample, &it.video, seg_frames)?;
            row.toy_segment_error += errs.iter().sum::<f64>() / errs.len() as f64;
            row.toy_temporal_error += temporal_error(&sample, &it.video);
            row.toy_dynamic_degree += dynamic_degree(&sample);
        }
        row.toy_segment_error /= draws as f64;
        row.toy_temporal_error /= draws as f64;
        row.toy_dynamic_degree /= draws as f64;
        rows.push(row);
    }
    Ok(rows)
}

/// Mean L1 mismatch of frame-to-frame deltas against the ground truth:
/// low values mean the clip moves the way the true clip moves.
pub fn temporal_error(sample: &MicroVideo, gt: &MicroVideo) -> f64 {
    let (t_len, d_len) = (sample.rows(), sample.cols());
    if t_len < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for f in 0..t_len - 1 {
        for d in 0..d_len {
            let ds = sample.at(f + 1, d) - sample.at(f, d);
            let dg = gt.at(f + 1, d) - gt.at(f, d);
            acc += (ds - dg).abs();
        }
    }
    acc / ((t_len - 1) as f64 * d_len as f64)
}

pub fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    EvalSummary {
        toy_segment_error: rows.iter().map(|r| r.toy_segment_error).sum::<f64>() / n,
        toy_temporal_error: rows.iter().map(|r| r.toy_temporal_error).sum::<f64>() / n,
        toy_dynamic_degree: rows.iter().map(|r| r.toy_dynamic_degree).sum::<f64>() / n,
    }
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut lines = vec![EVAL_HEADER.to_string()];
    lines.extend(rows.iter().map(|r| {
        format!(
            "{},{},{},{}",
            r.spec_id, r.toy_segment_error, r.toy_temporal_error, r.toy_dynamic_degree
        )
    }));
    write_lines(path, &lines)
}

/// Evaluate a checkpoint (`dpo.ckpt` if present, else `sft.ckpt`, unless
/// overridden) on the holdout split.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, ckpt: Option<&Path>) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let data = load_dataset(cfg, out)?;
    let net = VelocityNet::load(resolve_ckpt(out, ckpt)?)?;
    let rows = eval_rows(
        &net,
        &data.holdout,
        cfg.world.seg_frames,
        cfg.eval.n_steps,
        cfg.eval.samples_per_item,
        derive_seed(cfg.seed, "eval"),
    )?;
    write_eval_csv(&out.join(EVAL_CSV), &rows)?;
    RunManifest::record(cfg, "eval", out, &[EVAL_CSV], started)
}

pub fn resolve_ckpt(out: &Path, explicit: Option<&Path>) -> Result<std::path::PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let dpo = out.join(DPO_CKPT);
    if dpo.exists() {
        return Ok(dpo);
    }
    let sft = out.join(SFT_CKPT);
    if sft.exists() {
        return Ok(sft);
    }
    Err(Error::Config(format!(
        "no checkpoint found in {}; run train-sft first or pass --ckpt",
        out.display()
    )))
}

// ---------------------------------------------------------------------------
// dominance probe

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeManifestFile {
    pub checkpoint_sha256: String,
    pub window: usize,
    pub tol: f64,
    pub seed: u64,
    pub ladder: Vec<f64>,
    pub items: usize,
    pub draws_per_item: usize,
    pub shared_noise: bool,
}

pub fn cmd_probe_dominance(cfg: &RunConfig, out: &Path, ckpt: Option<&Path>) -> Result<RunManifest> {
    let started = std::time::Instant::now();
    let ckpt_path = resolve_ckpt(out, ckpt)?;
    let net = VelocityNet::load(&ckpt_path)?;
    // probe items come straight from the lattice so the probe can exceed
    // the dataset size
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "probe"));
    let items = make_dataset(
        &cfg.world.lattice,
        cfg.probe.items,
        &cfg.world.strata_weights,
        cfg.world.t_len,
        cfg.world.d_len,
        &mut rng,
    )?;
    let pairs: Vec<(MicroVideo, Tensor)> = items
        .into_iter()
        .map(|it| (it.video, it.cond))
        .collect();
    let seg = cfg.world.seg_frames;
    let settings = SweepSettings {
        corrupt_frames: cfg.probe.corrupt_segment * seg..(cfg.probe.corrupt_segment + 1) * seg,
        kind: cfg.probe.kind,
        draws_per_item: cfg.probe.draws_per_item,
        shared_noise: cfg.probe.shared_noise,
    };
    let rows = dominance_sweep(&net, &pairs, &cfg.probe.ladder, &settings, &mut rng)?;

    let mut lines = vec![DominanceRow::csv_header().to_string()];
    lines.extend(rows.iter().map(|r| r.csv_row()));
    write_lines(out.join(DOMINANCE_CSV), &lines)?;

    let mut files: Vec<&str> = vec![DOMINANCE_CSV, PROBE_MANIFEST];
    if cfg.probe.dump_items > 0 {
        // long-form per-position dump for external heatmap tooling
        let mut dump = vec!["severity,item,frame,cell,delta".to_string()];
        let mut drng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "probe-dump"));
        for &severity in &cfg.probe.ladder {
            for (i, (video, cond)) in pairs.iter().take(cfg.probe.dump_items).enumerate() {
                let event = ArtifactEvent {
                    start_frame: settings.corrupt_frames.start,
                    end_frame: settings.corrupt_frames.end.min(video.rows()),
                    severity,
                    kind: settings.kind,
                };
                let corrupted = inject_artifact(video, &event, &mut drng)?;
                let t = crate::flow::LogitNormal::default().sample(&mut drng).value();
                let eps = Tensor::randn(video.shape().to_vec(), &mut drng);
                let l_win = crate::dominance::per_position_loss(&net, video, cond, t, &eps)?;
                let l_lose =
                    crate::dominance::per_position_loss(&net, &corrupted, cond, t, &eps)?;
                let delta = crate::dominance::loss_difference(&l_win, &l_lose)?;
                for f in 0..delta.rows() {
                    for d in 0..delta.cols() {
                        dump.push(format!("{severity},{i},{f},{d},{}", delta.at(f, d)));
                    }
                }
            }
        }
        write_lines(out.join("dominance_items.csv"), &dump)?;
        files.push("dominance_items.csv");
    }
    let pm = ProbeManifestFile {
        checkpoint_sha256: sha256_file(&ckpt_path)?,
        window: net.cfg.window,
        tol: cfg.probe.tol,
        seed: cfg.seed,
        ladder: cfg.probe.ladder.clone(),
        items: cfg.probe.items,
        draws_per_item: cfg.probe.draws_per_item,
        shared_noise: cfg.probe.shared_noise,
    };
    std::fs::write(out.join(PROBE_MANIFEST), serde_json::to_string_pretty(&pm)?)?;
    RunManifest::record(cfg, "probe-dominance", out, &files, started)
}

// ---------------------------------------------------------------------------
// helpers shared with studies

/// Flip the dense labels of every pair, dropping pairs that become
/// all-tie. Used by the label-noise ablation.
pub fn flip_pair_labels<R: Rng>(
    pairs: &[PreferencePair],
    p: f64,
    rng: &mut R,
) -> Vec<PreferencePair> {
    pairs
        .iter()
        .map(|pair| {
            let mut q = pair.clone();
            q.dense = q.dense.map(|d| flip_dense(&d, p, rng));
            q
        })
        .filter(|q| {
            q.dense
                .as_ref()
                .map(|d| d.non_tie_count() > 0)
                .unwrap_or(true)
        })
        .collect()
}

/// Re-label pairs with majority-voted global labels derived from their
/// dense labels, dropping voting ties.
pub fn majority_pairs(pairs: &[PreferencePair]) -> Vec<PreferencePair> {
    pairs
        .iter()
        .filter_map(|p| {
            let dense = p.dense.as_ref()?;
            let vote = crate::preference::majority_vote(dense);
            if vote.is_tie() {
                return None;
            }
            let mut q = p.clone();
            q.dense = None;
            q.global = Some(vote);
            Some(q)
        })
        .collect()
}

/// Render a fresh ground-truth video for a pair's spec. Convenience for
/// tests and examples that need alignment without a dataset handle.
pub fn render_for(spec: &TrajectorySpec) -> Result<MicroVideo> {
    render_video(spec)
}

/// Global labels for dense-labeled pairs via a fresh oracle pass (not
/// voting), used by aggregation studies.
pub fn global_labeled<R: Rng>(
    cfg: &RunConfig,
    pairs: &[PreferencePair],
    data: &Dataset,
    _rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    let (_, tau_g) = margins(pairs, data, cfg.world.seg_frames, cfg.annotate.tau_frac, cfg.annotate.tau_global_frac)?;
    let mut out = Vec::new();
    for p in pairs {
        let gt = &data.find(p.spec_id).expect("margins checked").video;
        let label = oracle_global(&p.x0, &p.x1, gt, cfg.annotate.lambda_bias, tau_g)?;
        if label.is_tie() {
            continue;
        }
        let mut q = p.clone();
        q.dense = None;
        q.global = Some(label);
        out.push(q);
    }
    Ok(out)
}

/// Re-annotate dense labels at a different segment length.
pub fn dense_relabel(
    cfg: &RunConfig,
    pairs: &[PreferencePair],
    data: &Dataset,
    seg_frames: usize,
) -> Result<Vec<PreferencePair>> {
    let (tau, _) = margins(pairs, data, seg_frames, cfg.annotate.tau_frac, cfg.annotate.tau_global_frac)?;
    let mut out = Vec::new();
    for p in pairs {
        let gt = &data.find(p.spec_id).expect("margins checked").video;
        let label = annotate_dense(p, gt, seg_frames, tau)?;
        if label.non_tie_count() == 0 {
            continue;
        }
        let mut q = p.clone();
        q.dense = Some(label);
        out.push(q);
    }
    Ok(out)
}
