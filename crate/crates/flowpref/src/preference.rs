//! Preference data: labels, oracle annotators, perturbations, aggregation,
//! filtering, and the line-oriented label exchange format.
//!
//! Labels are ternary: `+1` prefers the first clip, `-1` the second, `0` is
//! a tie. Global labels judge the whole clip; dense labels judge temporal
//! segments of `s` frames each, `F = ceil(T / s)` segments per clip. Every
//! oracle is antisymmetric: swapping the two clips negates the label.
//!
//! Ties are decided by a quantitative margin rather than a human judgment
//! call: two sides closer than the margin are a tie. Margins default to a
//! fraction of the median segment error of the dataset being annotated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::{local_dynamic_degree, MicroVideo};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Global preference over a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pref {
    First,
    Second,
    Tie,
}

impl Pref {
    pub fn sign(self) -> i8 {
        match self {
            Pref::First => 1,
            Pref::Second => -1,
            Pref::Tie => 0,
        }
    }

    pub fn from_sign(s: i8) -> Result<Self> {
        match s {
            1 => Ok(Pref::First),
            -1 => Ok(Pref::Second),
            0 => Ok(Pref::Tie),
            other => Err(Error::Label(format!("label entry {other} not in {{-1,0,+1}}"))),
        }
    }

    pub fn negate(self) -> Self {
        match self {
            Pref::First => Pref::Second,
            Pref::Second => Pref::First,
            Pref::Tie => Pref::Tie,
        }
    }

    pub fn is_tie(self) -> bool {
        self == Pref::Tie
    }
}

/// Per-segment preference vector in `{-1, 0, +1}^F` with segment length
/// `seg_frames`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLabel {
    pub seg_labels: Vec<i8>,
    pub seg_frames: usize,
}

impl DenseLabel {
    pub fn new(seg_labels: Vec<i8>, seg_frames: usize) -> Result<Self> {
        if seg_frames == 0 {
            return Err(Error::Label("segment length must be positive".into()));
        }
        if let Some(&bad) = seg_labels.iter().find(|&&l| !(-1..=1).contains(&l)) {
            return Err(Error::Label(format!("label entry {bad} not in {{-1,0,+1}}")));
        }
        Ok(Self {
            seg_labels,
            seg_frames,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.seg_labels.len()
    }

    pub fn non_tie_count(&self) -> usize {
        self.seg_labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn non_tie_fraction(&self) -> f64 {
        if self.seg_labels.is_empty() {
            0.0
        } else {
            self.non_tie_count() as f64 / self.seg_labels.len() as f64
        }
    }

    pub fn negate(&self) -> Self {
        Self {
            seg_labels: self.seg_labels.iter().map(|l| -l).collect(),
            seg_frames: self.seg_frames,
        }
    }
}

/// Where a pair came from. Dense annotation requires guided provenance:
/// only guided pairs are temporally aligned with their ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Vanilla,
    Guided { eta: f64 },
}

impl Provenance {
    pub fn is_guided(&self) -> bool {
        matches!(self, Provenance::Guided { .. })
    }
}

#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub id: String,
    /// Dataset id of the ground-truth clip this pair's condition refers to.
    pub spec_id: usize,
    pub cond: Tensor,
    pub x0: MicroVideo,
    pub x1: MicroVideo,
    pub provenance: Provenance,
    pub global: Option<Pref>,
    pub dense: Option<DenseLabel>,
}

/// Half-open frame ranges of the `ceil(T/s)` segments; the last may be
/// short.
pub fn segment_bounds(t_len: usize, seg_frames: usize) -> Result<Vec<(usize, usize)>> {
    if seg_frames == 0 || t_len == 0 {
        return Err(Error::Config("segment length and T must be positive".into()));
    }
    Ok((0..t_len)
        .step_by(seg_frames)
        .map(|s| (s, (s + seg_frames).min(t_len)))
        .collect())
}

/// Split a clip into segments along the frame axis. Concatenating the
/// pieces reproduces the clip.
pub fn split_segments(video: &MicroVideo, seg_frames: usize) -> Result<Vec<Tensor>> {
    let bounds = segment_bounds(video.rows(), seg_frames)?;
    let d = video.cols();
    bounds
        .into_iter()
        .map(|(s, e)| {
            Tensor::new(
                vec![e - s, d],
                video.data()[s * d..e * d].to_vec(),
            )
        })
        .collect()
}

/// Mean squared error of `x` against `gt` per segment.
pub fn segment_errors(x: &MicroVideo, gt: &MicroVideo, seg_frames: usize) -> Result<Vec<f64>> {
    if !x.same_shape(gt) {
        return Err(Error::Shape("segment_errors over mismatched clips".into()));
    }
    let d = x.cols();
    segment_bounds(x.rows(), seg_frames)?
        .into_iter()
        .map(|(s, e)| {
            let n = (e - s) * d;
            let mse = x.data()[s * d..e * d]
                .iter()
                .zip(&gt.data()[s * d..e * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n as f64;
            Ok(mse)
        })
        .collect()
}

/// Per-segment oracle: compares each side's segment error against the
/// aligned ground truth, with a tie margin `tau`.
pub fn oracle_dense(
    x0: &MicroVideo,
    x1: &MicroVideo,
    gt: &MicroVideo,
    seg_frames: usize,
    tau: f64,
) -> Result<DenseLabel> {
    let e0 = segment_errors(x0, gt, seg_frames)?;
    let e1 = segment_errors(x1, gt, seg_frames)?;
    let seg_labels = e0
        .iter()
        .zip(&e1)
        .map(|(&a, &b)| {
            if a < b - tau {
                1
            } else if b < a - tau {
                -1
            } else {
                0
            }
        })
        .collect();
    DenseLabel::new(seg_labels, seg_frames)
}

/// Dense annotation of a pair; refuses vanilla pairs, which are not
/// temporally aligned with any ground truth.
pub fn annotate_dense(
    pair: &PreferencePair,
    gt: &MicroVideo,
    seg_frames: usize,
    tau: f64,
) -> Result<DenseLabel> {
    if !pair.provenance.is_guided() {
        return Err(Error::Label(format!(
            "pair {}: dense labels require guided provenance",
            pair.id
        )));
    }
    oracle_dense(&pair.x0, &pair.x1, gt, seg_frames, tau)
}

/// Whole-clip oracle with a controllable motion bias. Each side is scored
/// as `-(total error) - lambda_bias * mean_f(err_f * local_motion_f)`: the
/// annotator penalizes visible defects more when they sit in high-motion
/// frames. Scores closer than `tau_global` are a tie.
pub fn oracle_global(
    x0: &MicroVideo,
    x1: &MicroVideo,
    gt: &MicroVideo,
    lambda_bias: f64,
    tau_global: f64,
) -> Result<Pref> {
    let s0 = clip_quality_score(x0, gt, lambda_bias)?;
    let s1 = clip_quality_score(x1, gt, lambda_bias)?;
    Ok(if s0 > s1 + tau_global {
        Pref::First
    } else if s1 > s0 + tau_global {
        Pref::Second
    } else {
        Pref::Tie
    })
}

/// The annotator's per-clip quality model: negative total error minus a
/// motion-weighted visibility penalty. Comparing two scores (with a tie
/// margin) is the whole-clip oracle; the score itself also supports
/// annotation studies that compare clips across specs.
pub fn clip_quality_score(x: &MicroVideo, gt: &MicroVideo, lambda_bias: f64) -> Result<f64> {
    if !x.same_shape(gt) {
        return Err(Error::Shape("global score over mismatched clips".into()));
    }
    let (t_len, d_len) = (x.rows(), x.cols());
    let mut err_total = 0.0;
    let mut bias = 0.0;
    for f in 0..t_len {
        let err_f = x
            .row(f)
            .iter()
            .zip(gt.row(f))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d_len as f64;
        err_total += err_f;
        bias += err_f * local_dynamic_degree(x, f);
    }
    Ok(-err_total / t_len as f64 - lambda_bias * bias / t_len as f64)
}

/// Stochastic label from rewards: first wins with probability
/// `sigmoid(r0 - r1)`. Never a tie.
pub fn bt_sample<R: Rng>(r0: f64, r1: f64, rng: &mut R) -> Pref {
    let p = crate::graph::sigmoid(r0 - r1);
    if rng.gen_bool(p.clamp(0.0, 1.0)) {
        Pref::First
    } else {
        Pref::Second
    }
}

/// Aggregate a dense label to a global one: zeros abstain, strict majority
/// wins, equal counts are a tie.
pub fn majority_vote(label: &DenseLabel) -> Pref {
    let pos = label.seg_labels.iter().filter(|&&l| l > 0).count();
    let neg = label.seg_labels.iter().filter(|&&l| l < 0).count();
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Pref::First,
        std::cmp::Ordering::Less => Pref::Second,
        std::cmp::Ordering::Equal => Pref::Tie,
    }
}

/// Independently negate each non-tie entry with probability `p`. Ties are
/// untouched.
pub fn flip_entries<R: Rng>(labels: &mut [i8], p: f64, rng: &mut R) {
    for l in labels.iter_mut() {
        if *l != 0 && rng.gen_bool(p) {
            *l = -*l;
        }
    }
}

pub fn flip_dense<R: Rng>(label: &DenseLabel, p: f64, rng: &mut R) -> DenseLabel {
    let mut seg_labels = label.seg_labels.clone();
    flip_entries(&mut seg_labels, p, rng);
    DenseLabel {
        seg_labels,
        seg_frames: label.seg_frames,
    }
}

pub fn flip_global<R: Rng>(label: Pref, p: f64, rng: &mut R) -> Pref {
    let mut v = [label.sign()];
    flip_entries(&mut v, p, rng);
    Pref::from_sign(v[0]).expect("sign stays valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub retention: f64,
}

/// Keep dense-labeled pairs whose non-tie fraction strictly exceeds the
/// threshold. Reports the retention rate; the rate itself is a statistic of
/// the data, not an assertion.
pub fn filter_pairs(
    pairs: Vec<PreferencePair>,
    min_nontie_frac: f64,
) -> Result<(Vec<PreferencePair>, FilterStats)> {
    let total = pairs.len();
    let mut kept = Vec::with_capacity(total);
    for p in pairs {
        let dense = p.dense.as_ref().ok_or_else(|| {
            Error::Label(format!("pair {}: filtering requires a dense label", p.id))
        })?;
        if dense.non_tie_fraction() > min_nontie_frac {
            kept.push(p);
        }
    }
    let stats = FilterStats {
        total,
        kept: kept.len(),
        retention: if total == 0 {
            0.0
        } else {
            kept.len() as f64 / total as f64
        },
    };
    Ok((kept, stats))
}

/// Drop tie-labeled pairs from a globally labeled set.
pub fn remove_tie_pairs(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    pairs
        .into_iter()
        .filter(|p| matches!(p.global, Some(l) if !l.is_tie()))
        .collect()
}

/// Keep a judgment only if reversing the presentation order negates it;
/// everything else becomes a tie.
pub fn self_consistency(fwd: Pref, rev: Pref) -> Pref {
    if rev == fwd.negate() {
        fwd
    } else {
        Pref::Tie
    }
}

/// Entrywise self-consistency for dense labels.
pub fn self_consistency_dense(fwd: &DenseLabel, rev: &DenseLabel) -> Result<DenseLabel> {
    if fwd.seg_labels.len() != rev.seg_labels.len() || fwd.seg_frames != rev.seg_frames {
        return Err(Error::Label("self-consistency over mismatched labels".into()));
    }
    let seg_labels = fwd
        .seg_labels
        .iter()
        .zip(&rev.seg_labels)
        .map(|(&f, &r)| if r == -f { f } else { 0 })
        .collect();
    DenseLabel::new(seg_labels, fwd.seg_frames)
}

/// One line of the label exchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub pair_id: String,
    /// "dense" or "global"
    pub kind: String,
    pub s_frames: usize,
    pub labels: Vec<i8>,
}

/// Write one JSON record per line for every labeled pair, dense labels
/// before global ones per pair, pairs in input order.
pub fn export_labels<P: AsRef<Path>>(pairs: &[PreferencePair], path: P) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        if let Some(d) = &p.dense {
            let rec = LabelRecord {
                pair_id: p.id.clone(),
                kind: "dense".into(),
                s_frames: d.seg_frames,
                labels: d.seg_labels.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        if let Some(g) = p.global {
            let rec = LabelRecord {
                pair_id: p.id.clone(),
                kind: "global".into(),
                s_frames: p.x0.rows(),
                labels: vec![g.sign()],
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

pub fn read_label_records<P: AsRef<Path>>(path: P) -> Result<Vec<LabelRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Label(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImportStats {
    pub applied: usize,
    /// Pairs that received no record and stay unlabeled.
    pub unlabeled: usize,
}

/// Apply exchange records to a pair set. Unknown pair ids, label vectors of
/// the wrong length, and out-of-range entries are rejected with the pair id
/// in the message. Pairs without records simply remain unlabeled.
pub fn import_labels<P: AsRef<Path>>(
    pairs: &mut [PreferencePair],
    path: P,
) -> Result<ImportStats> {
    let records = read_label_records(path)?;
    let mut applied = 0usize;
    for rec in records {
        let pair = pairs
            .iter_mut()
            .find(|p| p.id == rec.pair_id)
            .ok_or_else(|| Error::Label(format!("unknown pair id '{}'", rec.pair_id)))?;
        match rec.kind.as_str() {
            "dense" => {
                let bounds = segment_bounds(pair.x0.rows(), rec.s_frames)?;
                if rec.labels.len() != bounds.len() {
                    return Err(Error::Label(format!(
                        "pair '{}': dense label length {} but {} segments",
                        rec.pair_id,
                        rec.labels.len(),
                        bounds.len()
                    )));
                }
                pair.dense = Some(
                    DenseLabel::new(rec.labels, rec.s_frames)
                        .map_err(|e| Error::Label(format!("pair '{}': {e}", rec.pair_id)))?,
                );
            }
            "global" => {
                if rec.labels.len() != 1 {
                    return Err(Error::Label(format!(
                        "pair '{}': global label must have exactly one entry",
                        rec.pair_id
                    )));
                }
                pair.global = Some(
                    Pref::from_sign(rec.labels[0])
                        .map_err(|e| Error::Label(format!("pair '{}': {e}", rec.pair_id)))?,
                );
            }
            other => {
                return Err(Error::Label(format!(
                    "pair '{}': unknown label kind '{other}'",
                    rec.pair_id
                )))
            }
        }
        applied += 1;
    }
    let unlabeled = pairs
        .iter()
        .filter(|p| p.global.is_none() && p.dense.is_none())
        .count();
    Ok(ImportStats { applied, unlabeled })
}

/// Tie margin from data: `frac` times the median of the given error pool.
/// Returns 0 for an empty pool.
pub fn margin_from_errors(mut errors: Vec<f64>, frac: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    frac * errors[errors.len() / 2]
}
