//! Preference optimization against a frozen reference model.
//!
//! The learning signal is the *implicit reward*: at a shared noisy input,
//! the trainable model's squared velocity error minus the frozen reference
//! model's, kept per frame so segment labels can mask it. With
//! `d = reward(x0) - reward(x1)` and label `l` (+1 when the first clip
//! wins), the global-label loss is
//!
//! ```text
//! loss = -log sigmoid(-c * l * mean(d))        c = beta/2 by default
//! ```
//!
//! and the dense loss applies the same form per segment, either averaging
//! `-log sigmoid(-c * l_f * d_f)` over non-tie frames (the default,
//! `per_segment`) or summing the labeled segment differences inside a
//! single sigmoid (`sum_in_sigmoid`). Both reduce exactly to the global
//! loss when there is one segment. Tied segments carry zero weight: their
//! frames contribute neither value nor gradient.
//!
//! At initialization (model == reference) every variant evaluates to ln 2.

use crate::error::{Error, Result};
use crate::flow::{forward_noise, velocity_target, LogitNormal};
use crate::graph::{NodeId, Tape};
use crate::net::{BoundNet, Denoiser, VelocityNet};
use crate::optim::{warmup_lr, AdamW};
use crate::preference::{segment_bounds, DenseLabel, Pref, PreferencePair, Provenance};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpoVariant {
    /// Global labels on independent-noise pairs.
    Vanilla,
    /// Global labels on guided (structurally similar) pairs.
    Structural,
    /// Per-segment labels on guided pairs.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseMode {
    /// Sigmoid per labeled frame, mean over non-tie frames (default).
    PerSegment,
    /// One sigmoid around the sum of labeled segment differences.
    SumInSigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub variant: DpoVariant,
    pub dense_mode: DenseMode,
    /// Reuse one noise draw for both clips of a pair (the usual practice);
    /// switch off for dominance studies of the independent-noise regime.
    pub shared_pair_noise: bool,
    /// Keep the -beta/2 coefficient; disabling folds the 1/2 into beta.
    pub half_factor: bool,
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub clip: f64,
    pub weight_decay: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 500.0,
            variant: DpoVariant::Dense,
            dense_mode: DenseMode::PerSegment,
            shared_pair_noise: true,
            half_factor: true,
            steps: 400,
            batch: 16,
            peak_lr: 3e-4,
            warmup: 60,
            clip: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }

    fn coef(&self) -> f64 {
        if self.half_factor {
            0.5 * self.beta
        } else {
            self.beta
        }
    }
}

/// Per-frame implicit reward of one clip at a fixed draw: model squared
/// velocity error minus reference squared velocity error, mean over grid
/// cells, one value per frame. Returned unreduced together with its mean.
pub fn implicit_reward(
    model: &impl Denoiser,
    reference: &impl Denoiser,
    x: &Tensor,
    cond: &Tensor,
    t: f64,
    eps: &Tensor,
) -> Result<(Vec<f64>, f64)> {
    let xt = forward_noise(x, t, eps)?;
    let target = velocity_target(x, eps)?;
    let pm = model.velocity(&xt, t, cond)?;
    let pr = reference.velocity(&xt, t, cond)?;
    let d = x.cols();
    let per_frame: Vec<f64> = (0..x.rows())
        .map(|f| {
            let em = pm
                .row(f)
                .iter()
                .zip(target.row(f))
                .map(|(p, v)| (p - v) * (p - v))
                .sum::<f64>()
                / d as f64;
            let er = pr
                .row(f)
                .iter()
                .zip(target.row(f))
                .map(|(p, v)| (p - v) * (p - v))
                .sum::<f64>()
                / d as f64;
            em - er
        })
        .collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((per_frame, mean))
}

/// Tape handles for one pair's reward computation.
pub struct PairGraph {
    /// `[T, D]` model predictions, per side; gradient probes hook here.
    pub pred0: NodeId,
    pub pred1: NodeId,
    /// `[T]` per-frame implicit rewards, per side.
    pub s0: NodeId,
    pub s1: NodeId,
    /// `[T]` per-frame reward difference `s0 - s1`.
    pub diff: NodeId,
}

/// Record one pair's per-frame implicit-reward difference on the tape.
/// The reference model's errors enter as constants; only the bound model
/// parameters are differentiable.
pub fn pair_reward_graph(
    tape: &mut Tape,
    net: &VelocityNet,
    bound: &BoundNet,
    reference: &VelocityNet,
    x0: &Tensor,
    x1: &Tensor,
    cond: &Tensor,
    t: f64,
    eps0: &Tensor,
    eps1: &Tensor,
) -> Result<PairGraph> {
    let side = |tape: &mut Tape, x: &Tensor, eps: &Tensor| -> Result<(NodeId, NodeId)> {
        let xt = forward_noise(x, t, eps)?;
        let target = velocity_target(x, eps)?;
        let ref_pred = reference.forward(&xt, t, cond)?;
        let ref_err: Vec<f64> = (0..x.rows())
            .map(|f| {
                ref_pred
                    .row(f)
                    .iter()
                    .zip(target.row(f))
                    .map(|(p, v)| (p - v) * (p - v))
                    .sum::<f64>()
                    / x.cols() as f64
            })
            .collect();
        let pred = net.forward_on(tape, bound, &xt, t, cond)?;
        let tgt = tape.constant(target);
        let err = tape.sub(pred, tgt)?;
        let sq = tape.square(err);
        let per_frame = tape.mean_axis1(sq)?;
        let r = tape.constant(Tensor::new(vec![x.rows()], ref_err)?);
        let s = tape.sub(per_frame, r)?;
        Ok((pred, s))
    };
    let (pred0, s0) = side(tape, x0, eps0)?;
    let (pred1, s1) = side(tape, x1, eps1)?;
    let diff = tape.sub(s0, s1)?;
    Ok(PairGraph {
        pred0,
        pred1,
        s0,
        s1,
        diff,
    })
}

/// Global-label loss node from a per-frame difference node.
pub fn global_loss_node(
    tape: &mut Tape,
    diff: NodeId,
    label: Pref,
    cfg: &DpoConfig,
) -> Result<NodeId> {
    if label.is_tie() {
        return Err(Error::Label(
            "tie label reached the global loss; remove ties upstream".into(),
        ));
    }
    let delta = tape.mean_all(diff);
    let arg = tape.scale(delta, cfg.coef() * label.sign() as f64);
    Ok(tape.softplus(arg))
}

/// Dense loss node from a per-frame difference node. Segment differences
/// are segment means of the per-frame values; tied segments carry exactly
/// zero weight in both modes.
pub fn dense_loss_node(
    tape: &mut Tape,
    diff: NodeId,
    label: &DenseLabel,
    cfg: &DpoConfig,
) -> Result<NodeId> {
    let t_len = tape.value(diff).len();
    let bounds = segment_bounds(t_len, label.seg_frames)?;
    if bounds.len() != label.n_segments() {
        return Err(Error::Label(format!(
            "dense label has {} segments, clip has {}",
            label.n_segments(),
            bounds.len()
        )));
    }
    if label.non_tie_count() == 0 {
        return Err(Error::Label(
            "all-tie dense label reached the loss; filter pairs upstream".into(),
        ));
    }
    let segdiff = tape.seg_mean(diff, bounds.clone())?;
    let coef = cfg.coef();
    match cfg.dense_mode {
        DenseMode::PerSegment => {
            // softplus(c * l_f * d_f) per segment, then a frame-count
            // weighted mean over non-tie segments == mean over non-tie
            // frames of the frame-expanded label
            let coefs: Vec<f64> = label
                .seg_labels
                .iter()
                .map(|&l| coef * l as f64)
                .collect();
            let nontie_frames: usize = bounds
                .iter()
                .zip(&label.seg_labels)
                .filter(|(_, &l)| l != 0)
                .map(|((s, e), _)| e - s)
                .sum();
            let weights: Vec<f64> = bounds
                .iter()
                .zip(&label.seg_labels)
                .map(|((s, e), &l)| {
                    if l != 0 {
                        (e - s) as f64 / nontie_frames as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            let f = label.n_segments();
            let args = tape.mul_const(segdiff, Tensor::new(vec![f], coefs)?)?;
            let sp = tape.softplus(args);
            let weighted = tape.mul_const(sp, Tensor::new(vec![f], weights)?)?;
            Ok(tape.sum_all(weighted))
        }
        DenseMode::SumInSigmoid => {
            let lvec: Vec<f64> = label.seg_labels.iter().map(|&l| l as f64).collect();
            let f = label.n_segments();
            let labeled = tape.mul_const(segdiff, Tensor::new(vec![f], lvec)?)?;
            let inner = tape.sum_all(labeled);
            let arg = tape.scale(inner, coef);
            Ok(tape.softplus(arg))
        }
    }
}

/// Value of the global-label loss at a fixed draw.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_dpo_loss_at(
    net: &VelocityNet,
    reference: &VelocityNet,
    pair: &PreferencePair,
    label: Pref,
    cfg: &DpoConfig,
    t: f64,
    eps0: &Tensor,
    eps1: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let g = pair_reward_graph(
        &mut tape, net, &bound, reference, &pair.x0, &pair.x1, &pair.cond, t, eps0, eps1,
    )?;
    let loss = global_loss_node(&mut tape, g.diff, label, cfg)?;
    Ok(tape.scalar_value(loss))
}

/// Value of the global-label loss, drawing `(t, eps)` from `rng`.
pub fn vanilla_dpo_loss<R: Rng>(
    net: &VelocityNet,
    reference: &VelocityNet,
    pair: &PreferencePair,
    label: Pref,
    cfg: &DpoConfig,
    rng: &mut R,
) -> Result<f64> {
    let (t, eps0, eps1) = draw_pair_noise(cfg, pair.x0.shape(), rng);
    vanilla_dpo_loss_at(net, reference, pair, label, cfg, t, &eps0, &eps1)
}

/// Value of the dense loss at a fixed draw.
#[allow(clippy::too_many_arguments)]
pub fn dense_dpo_loss_at(
    net: &VelocityNet,
    reference: &VelocityNet,
    pair: &PreferencePair,
    label: &DenseLabel,
    cfg: &DpoConfig,
    t: f64,
    eps0: &Tensor,
    eps1: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let g = pair_reward_graph(
        &mut tape, net, &bound, reference, &pair.x0, &pair.x1, &pair.cond, t, eps0, eps1,
    )?;
    let loss = dense_loss_node(&mut tape, g.diff, label, cfg)?;
    Ok(tape.scalar_value(loss))
}

/// Value of the dense loss, drawing `(t, eps)` from `rng`.
pub fn dense_dpo_loss<R: Rng>(
    net: &VelocityNet,
    reference: &VelocityNet,
    pair: &PreferencePair,
    label: &DenseLabel,
    cfg: &DpoConfig,
    rng: &mut R,
) -> Result<f64> {
    let (t, eps0, eps1) = draw_pair_noise(cfg, pair.x0.shape(), rng);
    dense_dpo_loss_at(net, reference, pair, label, cfg, t, &eps0, &eps1)
}

fn draw_pair_noise<R: Rng>(
    cfg: &DpoConfig,
    shape: &[usize],
    rng: &mut R,
) -> (f64, Tensor, Tensor) {
    let t = LogitNormal::default().sample(rng).value();
    let eps0 = Tensor::randn(shape.to_vec(), rng);
    let eps1 = if cfg.shared_pair_noise {
        eps0.clone()
    } else {
        Tensor::randn(shape.to_vec(), rng)
    };
    (t, eps0, eps1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub implicit_accuracy: f64,
    pub reward_winner: f64,
    pub reward_loser: f64,
    pub lr: f64,
}

impl TrainRecord {
    pub fn csv_header() -> &'static str {
        "step,loss,implicit_accuracy,lr,reward_gap"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            self.loss,
            self.implicit_accuracy,
            self.lr,
            self.reward_winner - self.reward_loser
        )
    }
}

#[derive(Debug)]
pub struct DpoRunOutput {
    pub net: VelocityNet,
    pub records: Vec<TrainRecord>,
    /// Step at which a non-finite loss or gradient aborted the run; the
    /// returned net is the last good checkpoint.
    pub diverged_at: Option<u64>,
}

fn validate_dataset(cfg: &DpoConfig, pairs: &[PreferencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("empty pair dataset".into()));
    }
    for p in pairs {
        if !p.x0.same_shape(&p.x1) {
            return Err(Error::Config(format!("pair {}: clip shapes differ", p.id)));
        }
        match cfg.variant {
            DpoVariant::Vanilla => {
                if !matches!(p.provenance, Provenance::Vanilla) {
                    return Err(Error::Config(format!(
                        "pair {}: vanilla training requires vanilla pairs",
                        p.id
                    )));
                }
                match p.global {
                    Some(l) if !l.is_tie() => {}
                    Some(_) => {
                        return Err(Error::Config(format!(
                            "pair {}: tie label; remove ties before training",
                            p.id
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "pair {}: vanilla training requires global labels",
                            p.id
                        )))
                    }
                }
            }
            DpoVariant::Structural => {
                if !p.provenance.is_guided() {
                    return Err(Error::Config(format!(
                        "pair {}: structural training requires guided pairs",
                        p.id
                    )));
                }
                match p.global {
                    Some(l) if !l.is_tie() => {}
                    Some(_) => {
                        return Err(Error::Config(format!(
                            "pair {}: tie label; remove ties before training",
                            p.id
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "pair {}: structural training requires global labels",
                            p.id
                        )))
                    }
                }
            }
            DpoVariant::Dense => {
                if !p.provenance.is_guided() {
                    return Err(Error::Config(format!(
                        "pair {}: dense training requires guided pairs",
                        p.id
                    )));
                }
                match &p.dense {
                    Some(d) if d.non_tie_count() > 0 => {}
                    Some(_) => {
                        return Err(Error::Config(format!(
                            "pair {}: all-tie dense label; filter pairs before training",
                            p.id
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "pair {}: dense training requires dense labels",
                            p.id
                        )))
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fine-tune against a frozen copy of `init`. The reference never moves;
/// the learning rate warms up linearly from zero; gradients are clipped by
/// global norm. Batch diagnostics are recorded *before* each update, so the
/// step-0 row shows the untouched model (loss ln 2, lr 0).
pub fn dpo_train<R: Rng>(
    cfg: &DpoConfig,
    pairs: &[PreferencePair],
    init: &VelocityNet,
    rng: &mut R,
) -> Result<DpoRunOutput> {
    cfg.validate()?;
    validate_dataset(cfg, pairs)?;
    let reference = init.clone();
    let mut net = init.clone();
    let mut last_good = net.clone();
    let mut opt = AdamW::new(&net, cfg.weight_decay, cfg.clip);
    let sampler = LogitNormal::default();
    let mut records = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let lr = warmup_lr(step, cfg.peak_lr, cfg.warmup);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let mut acc: Option<NodeId> = None;
        let mut correct = 0.0;
        let mut units = 0usize;
        let mut win_sum = 0.0;
        let mut lose_sum = 0.0;

        for _ in 0..cfg.batch {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let t = sampler.sample(rng).value();
            let eps0 = Tensor::randn(pair.x0.shape().to_vec(), rng);
            let eps1 = if cfg.shared_pair_noise {
                eps0.clone()
            } else {
                Tensor::randn(pair.x0.shape().to_vec(), rng)
            };
            let g = pair_reward_graph(
                &mut tape, &net, &bound, &reference, &pair.x0, &pair.x1, &pair.cond, t, &eps0,
                &eps1,
            )?;
            let loss_node = match cfg.variant {
                DpoVariant::Vanilla | DpoVariant::Structural => {
                    global_loss_node(&mut tape, g.diff, pair.global.unwrap(), cfg)?
                }
                DpoVariant::Dense => {
                    dense_loss_node(&mut tape, g.diff, pair.dense.as_ref().unwrap(), cfg)?
                }
            };
            accumulate_diagnostics(
                &tape, &g, pair, cfg, rng, &mut correct, &mut units, &mut win_sum, &mut lose_sum,
            );
            acc = Some(match acc {
                None => loss_node,
                Some(a) => tape.add(a, loss_node)?,
            });
        }

        let loss_node = tape.scale(acc.unwrap(), 1.0 / cfg.batch as f64);
        let loss = tape.scalar_value(loss_node);
        let finite_grads = if loss.is_finite() {
            let grads_all = tape.backward(loss_node)?;
            let grads = bound.collect_grads(&net, &grads_all);
            grads.is_finite().then_some(grads)
        } else {
            None
        };

        let Some(grads) = finite_grads else {
            return Ok(DpoRunOutput {
                net: last_good,
                records,
                diverged_at: Some(step),
            });
        };

        records.push(TrainRecord {
            step,
            loss,
            implicit_accuracy: if units > 0 {
                correct / units as f64
            } else {
                0.5
            },
            reward_winner: if units > 0 { win_sum / units as f64 } else { 0.0 },
            reward_loser: if units > 0 { lose_sum / units as f64 } else { 0.0 },
            lr,
        });

        last_good = net.clone();
        opt.step(&mut net, &grads, lr)?;
    }

    Ok(DpoRunOutput {
        net,
        records,
        diverged_at: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_diagnostics<R: Rng>(
    tape: &Tape,
    g: &PairGraph,
    pair: &PreferencePair,
    cfg: &DpoConfig,
    rng: &mut R,
    correct: &mut f64,
    units: &mut usize,
    win_sum: &mut f64,
    lose_sum: &mut f64,
) {
    let s0 = tape.value(g.s0);
    let s1 = tape.value(g.s1);
    match cfg.variant {
        DpoVariant::Vanilla | DpoVariant::Structural => {
            let l = pair.global.unwrap().sign() as f64;
            let d0 = s0.mean();
            let d1 = s1.mean();
            *correct += unit_correct(l, d0 - d1, rng);
            *units += 1;
            let (w, lo) = if l > 0.0 { (d0, d1) } else { (d1, d0) };
            *win_sum += w;
            *lose_sum += lo;
        }
        DpoVariant::Dense => {
            let label = pair.dense.as_ref().unwrap();
            let bounds = segment_bounds(s0.len(), label.seg_frames).expect("validated");
            for ((start, end), &l) in bounds.iter().zip(&label.seg_labels) {
                if l == 0 {
                    continue;
                }
                let seg = |v: &Tensor| {
                    v.data()[*start..*end].iter().sum::<f64>() / (end - start) as f64
                };
                let d0 = seg(s0);
                let d1 = seg(s1);
                *correct += unit_correct(l as f64, d0 - d1, rng);
                *units += 1;
                let (w, lo) = if l > 0 { (d0, d1) } else { (d1, d0) };
                *win_sum += w;
                *lose_sum += lo;
            }
        }
    }
}

/// A unit is counted correct when the preferred side carries the lower
/// model-minus-reference error, i.e. `l * d < 0` for `d = reward0 -
/// reward1`. An exactly zero difference is broken by a fair coin so that
/// flipping every label maps accuracy `a` to `1 - a` on the same draws.
fn unit_correct<R: Rng>(l: f64, d: f64, rng: &mut R) -> f64 {
    let d = if d == 0.0 {
        if rng.gen_bool(0.5) {
            1.0
        } else {
            -1.0
        }
    } else {
        d
    };
    if l * d < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Monte-Carlo implicit accuracy over labeled pairs: `draws` draws of
/// `(t, eps)` per pair (noise shared across the pair), counting global
/// pairs once and dense pairs once per non-tie segment.
pub fn implicit_accuracy<R: Rng>(
    model: &VelocityNet,
    reference: &VelocityNet,
    pairs: &[PreferencePair],
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let sampler = LogitNormal::default();
    let mut correct = 0.0;
    let mut units = 0usize;
    for pair in pairs {
        for _ in 0..draws {
            let t = sampler.sample(rng).value();
            let eps = Tensor::randn(pair.x0.shape().to_vec(), rng);
            let (f0, m0) = implicit_reward(model, reference, &pair.x0, &pair.cond, t, &eps)?;
            let (f1, m1) = implicit_reward(model, reference, &pair.x1, &pair.cond, t, &eps)?;
            if let Some(dense) = &pair.dense {
                let bounds = segment_bounds(f0.len(), dense.seg_frames)?;
                for ((s, e), &l) in bounds.iter().zip(&dense.seg_labels) {
                    if l == 0 {
                        continue;
                    }
                    let d0 = f0[*s..*e].iter().sum::<f64>() / (e - s) as f64;
                    let d1 = f1[*s..*e].iter().sum::<f64>() / (e - s) as f64;
                    correct += unit_correct(l as f64, d0 - d1, rng);
                    units += 1;
                }
            } else if let Some(g) = pair.global {
                if g.is_tie() {
                    continue;
                }
                correct += unit_correct(g.sign() as f64, m0 - m1, rng);
                units += 1;
            }
        }
    }
    if units == 0 {
        return Err(Error::Label("no labeled units to score".into()));
    }
    Ok(correct / units as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::world::{make_condition, render_video, TrajectorySpec};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn world_spec() -> TrajectorySpec {
        TrajectorySpec {
            amplitude: 3.0,
            frequency: 1.0,
            width: 1.2,
            phase: 0.7,
            d_len: 8,
            t_len: 12,
        }
    }

    fn small_net(seed: u64) -> VelocityNet {
        VelocityNet::init(
            NetConfig {
                t_len: 12,
                d_len: 8,
                window: 3,
                time_emb: 4,
                cond_dim: 5,
                hidden: vec![10],
            },
            seed,
        )
        .unwrap()
    }

    fn make_pair(seed: u64) -> PreferencePair {
        let spec = world_spec();
        let gt = render_video(&spec).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = gt
            .zip_map(&Tensor::randn(vec![12, 8], &mut rng), |a, b| a + 0.1 * b)
            .unwrap();
        let x1 = gt
            .zip_map(&Tensor::randn(vec![12, 8], &mut rng), |a, b| a + 0.1 * b)
            .unwrap();
        PreferencePair {
            id: format!("pair-{seed}"),
            spec_id: 0,
            cond: make_condition(&spec),
            x0,
            x1,
            provenance: Provenance::Guided { eta: 0.7 },
            global: Some(Pref::First),
            dense: None,
        }
    }

    #[test]
    fn implicit_reward_zero_at_reference() {
        let net = small_net(1);
        let pair = make_pair(2);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let (per_frame, mean) =
            implicit_reward(&net, &net, &pair.x0, &pair.cond, 0.4, &eps).unwrap();
        assert!(per_frame.iter().all(|&v| v == 0.0));
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn implicit_reward_matches_independent_recomputation() {
        let model = small_net(4);
        let reference = small_net(5);
        let pair = make_pair(6);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let t = 0.6;
        let (per_frame, _) =
            implicit_reward(&model, &reference, &pair.x0, &pair.cond, t, &eps).unwrap();

        // independent path: two full error maps differenced per frame
        let xt = forward_noise(&pair.x0, t, &eps).unwrap();
        let target = velocity_target(&pair.x0, &eps).unwrap();
        let pm = model.forward(&xt, t, &pair.cond).unwrap();
        let pr = reference.forward(&xt, t, &pair.cond).unwrap();
        for f in 0..12 {
            let em: f64 = pm
                .row(f)
                .iter()
                .zip(target.row(f))
                .map(|(p, v)| (p - v) * (p - v))
                .sum::<f64>()
                / 8.0;
            let er: f64 = pr
                .row(f)
                .iter()
                .zip(target.row(f))
                .map(|(p, v)| (p - v) * (p - v))
                .sum::<f64>()
                / 8.0;
            assert!((per_frame[f] - (em - er)).abs() < 1e-15);
        }
    }

    #[test]
    fn worse_reference_lowers_the_reward() {
        // scaling the reference prediction away from the target increases
        // the reference error, which decreases model_err - ref_err
        let model = small_net(8);
        let mut worse = model.clone();
        for p in worse.params_mut() {
            for v in p.data_mut() {
                *v *= 3.0;
            }
        }
        let pair = make_pair(9);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let (good_ref, _) =
            implicit_reward(&model, &model, &pair.x0, &pair.cond, 0.5, &eps).unwrap();
        let (bad_ref, _) =
            implicit_reward(&model, &worse, &pair.x0, &pair.cond, 0.5, &eps).unwrap();
        for (g, b) in good_ref.iter().zip(&bad_ref) {
            assert!(b <= g);
        }
    }

    #[test]
    fn loss_is_ln2_at_initialization() {
        let net = small_net(11);
        let cfg = DpoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for seed in 0..20 {
            let mut pair = make_pair(100 + seed);
            let v = vanilla_dpo_loss(&net, &net, &pair, Pref::First, &cfg, &mut rng).unwrap();
            assert!((v - LN2).abs() <= 1e-12, "vanilla {v}");

            pair.dense = Some(DenseLabel::new(vec![1, -1, 0], 4).unwrap());
            for mode in [DenseMode::PerSegment, DenseMode::SumInSigmoid] {
                let cfg = DpoConfig {
                    dense_mode: mode,
                    ..cfg.clone()
                };
                let d = dense_dpo_loss(
                    &net,
                    &net,
                    &pair,
                    pair.dense.as_ref().unwrap(),
                    &cfg,
                    &mut rng,
                )
                .unwrap();
                assert!((d - LN2).abs() <= 1e-12, "dense {d}");
            }
        }
    }

    #[test]
    fn worked_global_example() {
        // coef = 250, l = +1, mean diff = 0.002 -> softplus(0.5)
        let mut tape = Tape::new();
        let diff = tape.param(Tensor::filled(vec![6], 0.002));
        let cfg = DpoConfig::default();
        let loss = global_loss_node(&mut tape, diff, Pref::First, &cfg).unwrap();
        let want = (1.0 + 0.5f64.exp()).ln();
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
        assert!((want - 0.974_077_0).abs() < 1e-7);
    }

    #[test]
    fn worked_dense_example() {
        // two segments, constant per-frame diffs +0.001 / -0.001, labels
        // (+1, -1): both terms are softplus(0.25)
        let mut tape = Tape::new();
        let mut data = vec![0.001; 4];
        data.extend(vec![-0.001; 4]);
        let diff = tape.param(Tensor::new(vec![8], data).unwrap());
        let label = DenseLabel::new(vec![1, -1], 4).unwrap();
        let cfg = DpoConfig::default();
        let loss = dense_loss_node(&mut tape, diff, &label, &cfg).unwrap();
        let want = (1.0 + 0.25f64.exp()).ln();
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
        assert!((want - 0.825_939_4).abs() < 1e-7);
    }

    #[test]
    fn tie_labels_are_rejected() {
        let mut tape = Tape::new();
        let diff = tape.param(Tensor::filled(vec![6], 0.1));
        let cfg = DpoConfig::default();
        assert!(matches!(
            global_loss_node(&mut tape, diff, Pref::Tie, &cfg),
            Err(Error::Label(_))
        ));
        let all_tie = DenseLabel::new(vec![0, 0], 3).unwrap();
        assert!(matches!(
            dense_loss_node(&mut tape, diff, &all_tie, &cfg),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn swap_and_negate_leaves_losses_unchanged() {
        let net = small_net(13);
        let reference = small_net(14);
        let cfg = DpoConfig::default();
        let pair = make_pair(15);
        let mut swapped = pair.clone();
        std::mem::swap(&mut swapped.x0, &mut swapped.x1);
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let t = 0.45;

        let a =
            vanilla_dpo_loss_at(&net, &reference, &pair, Pref::First, &cfg, t, &eps, &eps)
                .unwrap();
        let b = vanilla_dpo_loss_at(
            &net, &reference, &swapped, Pref::Second, &cfg, t, &eps, &eps,
        )
        .unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");

        let label = DenseLabel::new(vec![1, 0, -1], 4).unwrap();
        for mode in [DenseMode::PerSegment, DenseMode::SumInSigmoid] {
            let cfg = DpoConfig {
                dense_mode: mode,
                ..cfg.clone()
            };
            let a =
                dense_dpo_loss_at(&net, &reference, &pair, &label, &cfg, t, &eps, &eps).unwrap();
            let b = dense_dpo_loss_at(
                &net,
                &reference,
                &swapped,
                &label.negate(),
                &cfg,
                t,
                &eps,
                &eps,
            )
            .unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn single_segment_dense_reduces_to_global() {
        let net = small_net(17);
        let reference = small_net(18);
        let pair = make_pair(19);
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        for i in 0..10 {
            let t = 0.2 + 0.06 * i as f64;
            let eps = Tensor::randn(vec![12, 8], &mut rng);
            let sign = if i % 2 == 0 { Pref::First } else { Pref::Second };
            let label = DenseLabel::new(vec![sign.sign()], 12).unwrap();
            let cfg = DpoConfig::default();
            let v =
                vanilla_dpo_loss_at(&net, &reference, &pair, sign, &cfg, t, &eps, &eps).unwrap();
            for mode in [DenseMode::PerSegment, DenseMode::SumInSigmoid] {
                let cfg = DpoConfig {
                    dense_mode: mode,
                    ..cfg.clone()
                };
                let d = dense_dpo_loss_at(&net, &reference, &pair, &label, &cfg, t, &eps, &eps)
                    .unwrap();
                let rel = (d - v).abs() / v.abs().max(1e-300);
                assert!(rel <= 1e-12, "mode {mode:?}: {d} vs {v}");
            }
        }
    }

    #[test]
    fn tied_frames_get_exactly_zero_gradient() {
        let net = small_net(21);
        let reference = small_net(22);
        let pair = make_pair(23);
        let label = DenseLabel::new(vec![1, 0, -1], 4).unwrap(); // frames 4..8 tied
        let cfg = DpoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let eps = Tensor::randn(vec![12, 8], &mut rng);

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let g = pair_reward_graph(
            &mut tape, &net, &bound, &reference, &pair.x0, &pair.x1, &pair.cond, 0.5, &eps, &eps,
        )
        .unwrap();
        let loss = dense_loss_node(&mut tape, g.diff, &label, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();
        for pred in [g.pred0, g.pred1] {
            let gp = grads.get(pred).expect("prediction gradient");
            for f in 0..12 {
                let row_zero = gp.row(f).iter().all(|&v| v == 0.0);
                if (4..8).contains(&f) {
                    assert!(row_zero, "tied frame {f} must have zero gradient");
                } else {
                    assert!(!row_zero, "labeled frame {f} should have signal");
                }
            }
        }
    }

    #[test]
    fn modifying_tied_interior_frames_leaves_dense_loss_unchanged() {
        // the temporal window is 3, so interior frames of a tied segment
        // (offsets 1..s-1) feed no labeled frame's prediction
        let net = small_net(25);
        let reference = small_net(26);
        let pair = make_pair(27);
        let label = DenseLabel::new(vec![1, 0, -1], 4).unwrap();
        let cfg = DpoConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let t = 0.35;

        let base =
            dense_dpo_loss_at(&net, &reference, &pair, &label, &cfg, t, &eps, &eps).unwrap();
        let mut edited = pair.clone();
        for f in 5..7 {
            for v in edited.x0.row_mut(f) {
                *v += 0.5;
            }
            for v in edited.x1.row_mut(f) {
                *v -= 0.25;
            }
        }
        let after =
            dense_dpo_loss_at(&net, &reference, &edited, &label, &cfg, t, &eps, &eps).unwrap();
        assert!(
            (base - after).abs() <= 1e-12,
            "tied-interior edit moved the loss: {base} vs {after}"
        );
    }

    #[test]
    fn loss_is_monotone_in_the_labeled_margin() {
        // increasing l * (d1 - d0) must strictly decrease the loss
        let cfg = DpoConfig::default();
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let margin = -0.004 + 0.001 * k as f64; // l=+1, diff = d0-d1 shrinking
            let mut tape = Tape::new();
            let diff = tape.param(Tensor::filled(vec![6], -margin));
            let loss = global_loss_node(&mut tape, diff, Pref::First, &cfg).unwrap();
            let v = tape.scalar_value(loss);
            assert!(v < prev, "loss must strictly decrease: {v} !< {prev}");
            prev = v;
        }
    }

    #[test]
    fn beta_scaling_moves_loss_away_from_ln2() {
        let mk = |beta: f64, diff_val: f64| {
            let cfg = DpoConfig {
                beta,
                ..DpoConfig::default()
            };
            let mut tape = Tape::new();
            let diff = tape.param(Tensor::filled(vec![4], diff_val));
            let loss = global_loss_node(&mut tape, diff, Pref::First, &cfg).unwrap();
            tape.scalar_value(loss)
        };
        // positive inside term: loss above ln 2, growing with beta
        let a = mk(250.0, 0.002);
        let b = mk(500.0, 0.002);
        assert!(a > LN2 && b > a);
        // negative inside term: loss below ln 2, shrinking with beta
        let c = mk(250.0, -0.002);
        let d = mk(500.0, -0.002);
        assert!(c < LN2 && d < c);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let base = small_net(29);
        let reference = base.clone();
        // start near the reference so the sigmoid stays in its active range
        let mut net = base.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v += 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        assert!(net.param_count() <= 2000);

        let pair = make_pair(31);
        let label = DenseLabel::new(vec![1, -1, 1], 4).unwrap();
        let cfg = DpoConfig::default();
        let eps = Tensor::randn(vec![12, 8], &mut rng);
        let t = 0.55;

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let g = pair_reward_graph(
            &mut tape, &net, &bound, &reference, &pair.x0, &pair.x1, &pair.cond, t, &eps, &eps,
        )
        .unwrap();
        let loss = dense_loss_node(&mut tape, g.diff, &label, &cfg).unwrap();
        let grads_all = tape.backward(loss).unwrap();
        let store = bound.collect_grads(&net, &grads_all);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe_rng = ChaCha12Rng::seed_from_u64(32);
        for _ in 0..20 {
            let pi = probe_rng.gen_range(0..store.tensors.len());
            let ei = probe_rng.gen_range(0..store.tensors[pi].len());
            let analytic = store.tensors[pi].data()[ei];
            let mut plus = net.clone();
            plus.params_mut()[pi].data_mut()[ei] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].data_mut()[ei] -= h;
            let lp =
                dense_dpo_loss_at(&plus, &reference, &pair, &label, &cfg, t, &eps, &eps).unwrap();
            let lm =
                dense_dpo_loss_at(&minus, &reference, &pair, &label, &cfg, t, &eps, &eps).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    fn labeled_pairs(n: usize, dense: bool) -> Vec<PreferencePair> {
        (0..n)
            .map(|i| {
                let mut p = make_pair(400 + i as u64);
                if dense {
                    p.global = None;
                    p.dense = Some(DenseLabel::new(vec![1, 0, -1], 4).unwrap());
                }
                p
            })
            .collect()
    }

    #[test]
    fn training_records_start_at_ln2_with_zero_lr() {
        let net = small_net(33);
        let cfg = DpoConfig {
            steps: 3,
            batch: 4,
            warmup: 10,
            peak_lr: 1e-4,
            ..DpoConfig::default()
        };
        let pairs = labeled_pairs(6, true);
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let out = dpo_train(&cfg, &pairs, &net, &mut rng).unwrap();
        assert!(out.diverged_at.is_none());
        assert!((out.records[0].loss - LN2).abs() < 1e-6);
        assert_eq!(out.records[0].lr, 0.0);
        assert_eq!(out.records.len(), 3);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let net = small_net(35);
        let cfg = DpoConfig {
            steps: 5,
            batch: 3,
            peak_lr: 1e-4,
            ..DpoConfig::default()
        };
        let pairs = labeled_pairs(4, true);
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(36);
            dpo_train(&cfg, &pairs, &net, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.net, b.net);
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.implicit_accuracy, y.implicit_accuracy);
        }
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let net = small_net(60);
        let cfg = DpoConfig {
            steps: 5,
            batch: 2,
            ..DpoConfig::default()
        };
        let mut pairs = labeled_pairs(2, true);
        // poison one clip so the first batch that touches it goes non-finite
        pairs[0].x0.data_mut()[0] = f64::NAN;
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let out = dpo_train(&cfg, &pairs, &net, &mut rng).unwrap();
        assert!(out.diverged_at.is_some());
        assert!(out.net.named_params().iter().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn variant_label_mismatch_is_config_error() {
        let net = small_net(37);
        let cfg = DpoConfig {
            variant: DpoVariant::Dense,
            ..DpoConfig::default()
        };
        let pairs = labeled_pairs(3, false); // global labels only
        let mut rng = ChaCha12Rng::seed_from_u64(38);
        assert!(matches!(
            dpo_train(&cfg, &pairs, &net, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn accuracy_near_half_at_reference_and_complements_under_flip() {
        let net = small_net(39);
        let pairs = labeled_pairs(40, true);
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let a = implicit_accuracy(&net, &net, &pairs, 4, &mut rng).unwrap();
        assert!((a - 0.5).abs() < 0.06, "accuracy {a}");

        let flipped: Vec<PreferencePair> = pairs
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.dense = q.dense.map(|d| d.negate());
                q
            })
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let b = implicit_accuracy(&net, &net, &flipped, 4, &mut rng).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b} != 1");
    }
}
