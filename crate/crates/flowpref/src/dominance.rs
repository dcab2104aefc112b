//! Loss-dominance probe.
//!
//! Takes a clean clip as the winning sample and a corrupted copy as the
//! losing sample, evaluates both per-position flow losses at the same
//! `(t, eps)` draw, and averages the losing-minus-winning difference map
//! separately over corrupted and uncorrupted positions, across a corruption
//! severity ladder. A positive mean over *uncorrupted* positions means the
//! losing sample's learning signal dominates exactly where the two samples
//! agree with the ground truth: the regime in which a global preference
//! loss pushes the model to unlearn good content.
//!
//! The probe only reports numbers; direction on trained checkpoints is
//! asserted by the acceptance suite, not here. Off-region effects exist
//! only because the denoiser has a temporal window wider than one frame, so
//! the window size travels with the output manifest.

use crate::error::{Error, Result};
use crate::flow::{forward_noise, velocity_target, LogitNormal};
use crate::net::Denoiser;
use crate::tensor::Tensor;
use crate::world::{inject_artifact, ArtifactEvent, ArtifactKind, MicroVideo};
use rand::Rng;
use serde::Serialize;

/// Boolean `[T, D]` position mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub t_len: usize,
    pub d_len: usize,
    mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(t_len: usize, d_len: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != t_len * d_len {
            return Err(Error::Shape("mask length mismatch".into()));
        }
        Ok(Self { t_len, d_len, mask })
    }

    pub fn empty(t_len: usize, d_len: usize) -> Self {
        Self {
            t_len,
            d_len,
            mask: vec![false; t_len * d_len],
        }
    }

    /// All positions in a frame range.
    pub fn from_frames(t_len: usize, d_len: usize, frames: std::ops::Range<usize>) -> Self {
        let mask = (0..t_len * d_len)
            .map(|i| frames.contains(&(i / d_len)))
            .collect();
        Self { t_len, d_len, mask }
    }

    pub fn get(&self, f: usize, d: usize) -> bool {
        self.mask[f * self.d_len + d]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            t_len: self.t_len,
            d_len: self.d_len,
            mask: self.mask.iter().map(|b| !b).collect(),
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// Mean of `map` over masked positions; 0 when the mask is empty.
    pub fn mean_over(&self, map: &Tensor) -> f64 {
        let n = self.count();
        if n == 0 {
            return 0.0;
        }
        map.data()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum::<f64>()
            / n as f64
    }
}

/// `[T, D]` map of squared velocity errors at a fixed draw. Its mean equals
/// the scalar flow loss for the same draw.
pub fn per_position_loss(
    d: &impl Denoiser,
    x: &Tensor,
    cond: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<Tensor> {
    let xt = forward_noise(x, t, eps)?;
    let target = velocity_target(x, eps)?;
    let pred = d.velocity(&xt, t, cond)?;
    pred.zip_map(&target, |p, v| (p - v) * (p - v))
}

/// Losing-minus-winning loss difference map.
pub fn loss_difference(l_win: &Tensor, l_lose: &Tensor) -> Result<Tensor> {
    l_lose.sub(l_win)
}

/// Split positions into those where both clips match the ground truth
/// within `tol` (the shared, intact region) and the rest. The two masks are
/// complementary by construction.
pub fn partition_same_unique(
    x0: &MicroVideo,
    x1: &MicroVideo,
    gt: &MicroVideo,
    tol: f64,
) -> Result<(RegionMask, RegionMask)> {
    if !x0.same_shape(x1) || !x0.same_shape(gt) {
        return Err(Error::Shape("partition over mismatched clips".into()));
    }
    let mask: Vec<bool> = x0
        .data()
        .iter()
        .zip(x1.data())
        .zip(gt.data())
        .map(|((a, b), g)| (a - g).abs() <= tol && (b - g).abs() <= tol)
        .collect();
    let same = RegionMask::new(x0.rows(), x0.cols(), mask)?;
    let unique = same.complement();
    Ok((same, unique))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceRow {
    pub severity: f64,
    pub mean_delta_uncorrupted: f64,
    pub mean_delta_corrupted: f64,
    /// Number of (item, draw) comparisons averaged.
    pub n: usize,
}

impl DominanceRow {
    pub fn csv_header() -> &'static str {
        "severity,mean_delta_uncorrupted,mean_delta_corrupted,n"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.severity, self.mean_delta_uncorrupted, self.mean_delta_corrupted, self.n
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    /// Frames to corrupt in the losing copy.
    pub corrupt_frames: std::ops::Range<usize>,
    pub kind: ArtifactKind,
    pub draws_per_item: usize,
    /// Reuse the winning sample's noise for the losing sample.
    pub shared_noise: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            corrupt_frames: 8..12,
            kind: ArtifactKind::SmoothingBlur,
            draws_per_item: 2,
            shared_noise: true,
        }
    }
}

/// For each severity: corrupt every base clip on the configured frame
/// range, evaluate winning (clean) and losing (corrupted) per-position
/// losses at shared draws, and average the difference map over the
/// corrupted region and its complement. Severity 0 compares identical
/// clips, so both means are exactly zero.
pub fn dominance_sweep<R: Rng>(
    d: &impl Denoiser,
    items: &[(MicroVideo, Tensor)],
    ladder: &[f64],
    settings: &SweepSettings,
    rng: &mut R,
) -> Result<Vec<DominanceRow>> {
    if ladder.is_empty() {
        return Err(Error::Config("empty severity ladder".into()));
    }
    if items.is_empty() {
        return Err(Error::Config("no items to sweep".into()));
    }
    if settings.draws_per_item == 0 {
        return Err(Error::Config("draws_per_item must be positive".into()));
    }
    let sampler = LogitNormal::default();
    let mut rows = Vec::with_capacity(ladder.len());
    for &severity in ladder {
        let mut sum_unc = 0.0;
        let mut sum_cor = 0.0;
        let mut n = 0usize;
        for (video, cond) in items {
            let event = ArtifactEvent {
                start_frame: settings.corrupt_frames.start,
                end_frame: settings.corrupt_frames.end.min(video.rows()),
                severity,
                kind: settings.kind,
            };
            let corrupted = inject_artifact(video, &event, rng)?;
            let region = if severity == 0.0 {
                RegionMask::empty(video.rows(), video.cols())
            } else {
                RegionMask::from_frames(video.rows(), video.cols(), event.frames())
            };
            let off_region = region.complement();
            for _ in 0..settings.draws_per_item {
                let t = sampler.sample(rng).value();
                let eps_win = Tensor::randn(video.shape().to_vec(), rng);
                let eps_lose = if settings.shared_noise {
                    eps_win.clone()
                } else {
                    Tensor::randn(video.shape().to_vec(), rng)
                };
                let l_win = per_position_loss(d, video, cond, t, &eps_win)?;
                let l_lose = per_position_loss(d, &corrupted, cond, t, &eps_lose)?;
                let delta = loss_difference(&l_win, &l_lose)?;
                sum_unc += off_region.mean_over(&delta);
                sum_cor += region.mean_over(&delta);
                n += 1;
            }
        }
        rows.push(DominanceRow {
            severity,
            mean_delta_uncorrupted: sum_unc / n as f64,
            mean_delta_corrupted: sum_cor / n as f64,
            n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::flow_loss_at;
    use crate::net::{NetConfig, VelocityNet};
    use crate::world::{make_condition, render_video, TrajectorySpec};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn spec() -> TrajectorySpec {
        TrajectorySpec {
            amplitude: 3.0,
            frequency: 1.0,
            width: 1.2,
            phase: 0.2,
            d_len: 8,
            t_len: 12,
        }
    }

    fn net() -> VelocityNet {
        VelocityNet::init(
            NetConfig {
                t_len: 12,
                d_len: 8,
                window: 3,
                time_emb: 4,
                cond_dim: 5,
                hidden: vec![10],
            },
            77,
        )
        .unwrap()
    }

    struct PointOracle {
        x_star: Tensor,
    }

    impl Denoiser for PointOracle {
        fn velocity(&self, noisy: &Tensor, t: f64, _c: &Tensor) -> Result<Tensor> {
            noisy.zip_map(&self.x_star, |n, s| (n - s) / t)
        }
    }

    #[test]
    fn oracle_denoiser_has_zero_map() {
        let gt = render_video(&spec()).unwrap();
        let oracle = PointOracle { x_star: gt.clone() };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let map =
            per_position_loss(&oracle, &gt, &make_condition(&spec()), 0.4, &eps).unwrap();
        assert!(map.data().iter().all(|&v| v < 1e-24));
    }

    #[test]
    fn map_mean_matches_scalar_loss() {
        let n = net();
        let gt = render_video(&spec()).unwrap();
        let cond = make_condition(&spec());
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let t = 0.6;
        let map = per_position_loss(&n, &gt, &cond, t, &eps).unwrap();
        let scalar = flow_loss_at(&n, &gt, &cond, t, &eps).unwrap();
        assert!((map.mean() - scalar).abs() <= 1e-12);
    }

    #[test]
    fn map_is_deterministic_for_fixed_draw() {
        let n = net();
        let gt = render_video(&spec()).unwrap();
        let cond = make_condition(&spec());
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let a = per_position_loss(&n, &gt, &cond, 0.3, &eps).unwrap();
        let b = per_position_loss(&n, &gt, &cond, 0.3, &eps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_difference_basics() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![2.0, 1.0, 3.0, 6.0]).unwrap();
        let d = loss_difference(&a, &b).unwrap();
        assert_eq!(d.data(), &[1.0, -1.0, 0.0, 2.0]);
        // identical maps -> zero
        assert!(loss_difference(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        // antisymmetry
        let r = loss_difference(&b, &a).unwrap();
        assert_eq!(d.scale(-1.0), r);
        // positive exactly where the losing map exceeds the winning one
        for (dv, (av, bv)) in d.data().iter().zip(a.data().iter().zip(b.data())) {
            assert_eq!(*dv > 0.0, bv > av);
        }
    }

    #[test]
    fn partition_trivial_cases() {
        let gt = render_video(&spec()).unwrap();
        let (same, unique) = partition_same_unique(&gt, &gt, &gt, 1e-9).unwrap();
        assert_eq!(same.count(), 12 * 8);
        assert_eq!(unique.count(), 0);

        // disjoint corruptions land in the unique set
        let mut x0 = gt.clone();
        for v in x0.row_mut(2) {
            *v += 1.0;
        }
        let mut x1 = gt.clone();
        for v in x1.row_mut(7) {
            *v += 1.0;
        }
        let (same, unique) = partition_same_unique(&x0, &x1, &gt, 1e-9).unwrap();
        assert_eq!(unique.count(), 2 * 8);
        for d in 0..8 {
            assert!(unique.get(2, d) && unique.get(7, d));
        }
        assert_eq!(same.count() + unique.count(), 12 * 8);

        // zero tolerance plus any noise empties the same-set
        let noisy0 = gt.map(|v| v + 1e-9);
        let (same, _) = partition_same_unique(&noisy0, &gt, &gt, 0.0).unwrap();
        assert_eq!(same.count(), 0);
    }

    #[test]
    fn severity_zero_row_is_exactly_zero() {
        let n = net();
        let gt = render_video(&spec()).unwrap();
        let items = vec![(gt, make_condition(&spec()))];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let rows = dominance_sweep(
            &n,
            &items,
            &[0.0, 2.0],
            &SweepSettings {
                corrupt_frames: 4..8,
                ..SweepSettings::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(rows[0].severity, 0.0);
        assert_eq!(rows[0].mean_delta_uncorrupted, 0.0);
        assert_eq!(rows[0].mean_delta_corrupted, 0.0);
        assert!(rows[0].n > 0);
    }

    #[test]
    fn empty_ladder_is_rejected() {
        let n = net();
        let gt = render_video(&spec()).unwrap();
        let items = vec![(gt, make_condition(&spec()))];
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        assert!(dominance_sweep(&n, &items, &[], &SweepSettings::default(), &mut rng).is_err());
    }
}
