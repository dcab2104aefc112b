//! Synthetic micro-video world.
//!
//! A micro-video is a `[T, D]` tensor: `T` frames of a `D`-cell 1-D grid.
//! Ground truth is a Gaussian bump whose center oscillates across the grid;
//! the trajectory's amplitude is the clip's motion strength. Localized
//! artifacts (temporal blur, contrast spikes) can be injected into a frame
//! range, and `dynamic_degree` gives a scalar motion measurement. Datasets
//! are sampled from a fixed parameter lattice with balanced motion strata.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `[T, D]` clip. Ground-truth clips live in `[0, 1]`; generated clips may
/// exceed that range.
pub type MicroVideo = Tensor;

/// Fixed normalizers for conditioning vectors; injective over any lattice
/// whose parameters stay below these bounds.
pub const AMP_NORM: f64 = 8.0;
pub const FREQ_NORM: f64 = 4.0;
pub const WIDTH_NORM: f64 = 4.0;

pub const COND_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    /// Motion strength: peak displacement of the bump center, in cells.
    pub amplitude: f64,
    /// Oscillation cycles per clip.
    pub frequency: f64,
    /// Gaussian bump width, in cells.
    pub width: f64,
    pub phase: f64,
    pub d_len: usize,
    pub t_len: usize,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.amplitude < 0.0 || self.frequency <= 0.0 || self.width <= 0.0 {
            return Err(Error::Config(format!("invalid trajectory: {self:?}")));
        }
        if self.d_len == 0 || self.t_len == 0 {
            return Err(Error::Config("empty grid".into()));
        }
        let center = (self.d_len - 1) as f64 / 2.0;
        if center - self.amplitude < 0.0 || center + self.amplitude > (self.d_len - 1) as f64 {
            return Err(Error::Config(format!(
                "bump escapes the grid: amplitude {} on D = {}",
                self.amplitude, self.d_len
            )));
        }
        Ok(())
    }

    /// Bump center at frame `f`.
    pub fn center_at(&self, f: usize) -> f64 {
        let base = (self.d_len - 1) as f64 / 2.0;
        base + self.amplitude
            * (2.0 * std::f64::consts::PI * self.frequency * f as f64 / self.t_len as f64
                + self.phase)
                .sin()
    }
}

/// Render the ground-truth clip for a trajectory. Deterministic; values in
/// (0, 1].
pub fn render_video(spec: &TrajectorySpec) -> Result<MicroVideo> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.t_len * spec.d_len);
    for f in 0..spec.t_len {
        let c = spec.center_at(f);
        for d in 0..spec.d_len {
            let z = (d as f64 - c) / spec.width;
            data.push((-0.5 * z * z).exp());
        }
    }
    Tensor::new(vec![spec.t_len, spec.d_len], data)
}

/// Conditioning vector: normalized spec parameters. Injective over any
/// lattice (phase enters through sin/cos), and the motion coordinate is
/// exactly zero for a static trajectory.
pub fn make_condition(spec: &TrajectorySpec) -> Tensor {
    Tensor::new(
        vec![COND_DIM],
        vec![
            spec.amplitude / AMP_NORM,
            spec.frequency / FREQ_NORM,
            spec.width / WIDTH_NORM,
            spec.phase.sin(),
            spec.phase.cos(),
        ],
    )
    .expect("cond vector")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Gaussian blur along the grid axis inside the frame range.
    SmoothingBlur,
    /// Severity-scaled contrast spike plus noise inside the frame range.
    AmplitudeSpike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEvent {
    /// Affected frames, half-open.
    pub start_frame: usize,
    pub end_frame: usize,
    /// Severity `k >= 0`; 0 is the identity.
    pub severity: f64,
    pub kind: ArtifactKind,
}

impl ArtifactEvent {
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start_frame..self.end_frame
    }
}

/// Corrupt the frames inside the event range; everything outside is
/// returned bit-identical. Severity 0 is the identity for both kinds.
pub fn inject_artifact<R: Rng>(
    video: &MicroVideo,
    event: &ArtifactEvent,
    rng: &mut R,
) -> Result<MicroVideo> {
    let (t_len, d_len) = (video.rows(), video.cols());
    if event.start_frame > event.end_frame || event.end_frame > t_len {
        return Err(Error::Config(format!(
            "artifact range {}..{} outside 0..{}",
            event.start_frame, event.end_frame, t_len
        )));
    }
    if event.severity < 0.0 {
        return Err(Error::Config("negative severity".into()));
    }
    if event.severity == 0.0 {
        return Ok(video.clone());
    }
    let mut out = video.clone();
    match event.kind {
        ArtifactKind::SmoothingBlur => {
            // Gaussian kernel renormalized at the grid edges. The kernel
            // width starts above the scale of features a few cells wide so
            // that any positive severity visibly degrades the content, and
            // grows by a quarter cell per severity level.
            let sigma = 2.0 + event.severity * 0.25;
            for f in event.frames() {
                let row: Vec<f64> = video.row(f).to_vec();
                let orow = out.row_mut(f);
                for d in 0..d_len {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        let z = (j as f64 - d as f64) / sigma;
                        let w = (-0.5 * z * z).exp();
                        acc += w * v;
                        wsum += w;
                    }
                    orow[d] = acc / wsum;
                }
            }
        }
        ArtifactKind::AmplitudeSpike => {
            // Exaggerate deviation from the row mean and add rough noise,
            // both scaled by severity.
            let gain = 1.0 + 0.1 * event.severity;
            let noise_sd = 0.01 * event.severity;
            for f in event.frames() {
                let mean = video.row(f).iter().sum::<f64>() / d_len as f64;
                let orow = out.row_mut(f);
                for v in orow.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = mean + gain * (*v - mean) + noise_sd * n;
                }
            }
        }
    }
    Ok(out)
}

/// Mean framewise motion: average over consecutive frame pairs of the L1
/// frame difference per cell. Zero for a constant clip, symmetric under
/// frame reversal.
pub fn dynamic_degree(video: &MicroVideo) -> f64 {
    let (t_len, d_len) = (video.rows(), video.cols());
    if t_len < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for f in 0..t_len - 1 {
        let a = video.row(f);
        let b = video.row(f + 1);
        acc += a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / d_len as f64;
    }
    acc / (t_len - 1) as f64
}

/// Motion at one frame: the L1 step to the next frame (the last frame
/// reuses its incoming step). Used by the biased global annotator.
pub fn local_dynamic_degree(video: &MicroVideo, f: usize) -> f64 {
    let (t_len, d_len) = (video.rows(), video.cols());
    if t_len < 2 {
        return 0.0;
    }
    let i = f.min(t_len - 2);
    video
        .row(i)
        .iter()
        .zip(video.row(i + 1))
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / d_len as f64
}

/// The sampling lattice for trajectory parameters: three amplitude strata
/// (low/medium/high motion) crossed with shared frequency, width, and phase
/// grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecLattice {
    pub amp_strata: Vec<Vec<f64>>,
    pub frequencies: Vec<f64>,
    pub widths: Vec<f64>,
    pub phases: Vec<f64>,
}

impl Default for SpecLattice {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            amp_strata: vec![
                vec![0.5, 1.0, 1.5],
                vec![2.5, 3.0, 3.5],
                vec![4.5, 5.0, 5.5],
            ],
            frequencies: vec![0.5, 1.0, 1.5, 2.0],
            widths: vec![1.0, 1.4, 1.8],
            phases: vec![0.0, 0.5 * PI, PI, 1.5 * PI],
        }
    }
}

impl SpecLattice {
    pub fn n_strata(&self) -> usize {
        self.amp_strata.len()
    }

    /// Every spec in one stratum.
    pub fn enumerate_stratum(&self, stratum: usize, t_len: usize, d_len: usize) -> Vec<TrajectorySpec> {
        let mut out = Vec::new();
        for &amplitude in &self.amp_strata[stratum] {
            for &frequency in &self.frequencies {
                for &width in &self.widths {
                    for &phase in &self.phases {
                        out.push(TrajectorySpec {
                            amplitude,
                            frequency,
                            width,
                            phase,
                            d_len,
                            t_len,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn enumerate_all(&self, t_len: usize, d_len: usize) -> Vec<TrajectorySpec> {
        (0..self.n_strata())
            .flat_map(|s| self.enumerate_stratum(s, t_len, d_len))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: usize,
    pub stratum: usize,
    pub spec: TrajectorySpec,
    pub video: MicroVideo,
    pub cond: Tensor,
}

/// Sample `count` items from the lattice with stratum counts allocated by
/// largest remainder (exact up to rounding), then shuffled. Deterministic
/// for a fixed rng state.
pub fn make_dataset<R: Rng>(
    lattice: &SpecLattice,
    count: usize,
    weights: &[f64],
    t_len: usize,
    d_len: usize,
    rng: &mut R,
) -> Result<Vec<DatasetItem>> {
    if weights.len() != lattice.n_strata() {
        return Err(Error::Config(format!(
            "{} strata weights for {} strata",
            weights.len(),
            lattice.n_strata()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("strata weights must be non-negative".into()));
    }

    // largest-remainder allocation of count across strata
    let quotas: Vec<f64> = weights.iter().map(|w| w / wsum * count as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remainder: Vec<(usize, f64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor()))
        .collect();
    remainder.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut short = count - alloc.iter().sum::<usize>();
    for (i, _) in remainder {
        if short == 0 {
            break;
        }
        alloc[i] += 1;
        short -= 1;
    }

    let mut items = Vec::with_capacity(count);
    for (stratum, &n) in alloc.iter().enumerate() {
        let pool = lattice.enumerate_stratum(stratum, t_len, d_len);
        if pool.is_empty() && n > 0 {
            return Err(Error::Config(format!("stratum {stratum} is empty")));
        }
        for _ in 0..n {
            let spec = pool[rng.gen_range(0..pool.len())];
            items.push((stratum, spec));
        }
    }
    items.shuffle(rng);

    items
        .into_iter()
        .enumerate()
        .map(|(id, (stratum, spec))| {
            let video = render_video(&spec)?;
            let cond = make_condition(&spec);
            Ok(DatasetItem {
                id,
                stratum,
                spec,
                video,
                cond,
            })
        })
        .collect()
}
