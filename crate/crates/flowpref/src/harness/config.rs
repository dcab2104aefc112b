//! Run configuration: one JSON document drives every pipeline stage.
//!
//! Every field has a default; unknown keys are rejected. Parsing,
//! serializing, and re-parsing a config is the identity, which the
//! manifest hashing relies on.

use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::flow::FitSchedule;
use crate::net::NetConfig;
use crate::world::{ArtifactKind, SpecLattice, COND_DIM};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub t_len: usize,
    pub d_len: usize,
    /// Frames per preference segment.
    pub seg_frames: usize,
    pub lattice: SpecLattice,
    pub strata_weights: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            t_len: 24,
            d_len: 16,
            seg_frames: 4,
            lattice: SpecLattice::default(),
            strata_weights: vec![1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub window: usize,
    pub time_emb: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            window: 3,
            time_emb: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub dataset_size: usize,
    pub holdout_size: usize,
    pub fit: FitSchedule,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            dataset_size: 192,
            holdout_size: 48,
            fit: FitSchedule {
                steps: 2500,
                batch: 16,
                peak_lr: 2e-3,
                warmup: 100,
                clip: 1.0,
                weight_decay: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Vanilla,
    Guided,
}

/// Controlled artifact injection into generated pairs. Severity scales
/// with each clip's own measured motion through `bias_coeff`:
/// `severity = base * (1 + bias_coeff * dynamic_degree(clip))`, so
/// `bias_coeff = 0` disables the motion bias while keeping artifacts, and
/// `prob = 0` disables injection entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    /// Probability that a pair receives an artifact in one clip.
    pub prob: f64,
    /// Probability that the other clip also receives one (disjoint segment).
    pub both_prob: f64,
    /// Base severities, drawn uniformly.
    pub severities: Vec<f64>,
    pub kind: ArtifactKind,
    /// Motion-bias coefficient applied to severity.
    pub bias_coeff: f64,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self {
            prob: 0.75,
            both_prob: 0.35,
            severities: vec![8.0, 16.0],
            kind: ArtifactKind::AmplitudeSpike,
            bias_coeff: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairGenConfig {
    pub mode: PairMode,
    pub count: usize,
    pub n_steps: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub artifacts: ArtifactConfig,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        Self {
            mode: PairMode::Guided,
            count: 96,
            n_steps: 40,
            eta_min: 0.65,
            eta_max: 0.8,
            artifacts: ArtifactConfig {
                prob: 0.0,
                ..ArtifactConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotator {
    OracleGlobal,
    OracleDense,
    Import,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub annotator: Annotator,
    /// Motion-bias strength of the global oracle.
    pub lambda_bias: f64,
    /// Dense tie margin as a fraction of the median segment error.
    pub tau_frac: f64,
    /// Global tie margin as a fraction of the median segment error.
    pub tau_global_frac: f64,
    /// Probability of flipping each non-tie label entry.
    pub flip_p: f64,
    /// Keep pairs whose non-tie segment fraction strictly exceeds this.
    pub min_nontie_frac: f64,
    /// Label file for `annotator = "import"`.
    pub import_path: Option<String>,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            annotator: Annotator::OracleDense,
            lambda_bias: 0.0,
            tau_frac: 0.1,
            tau_global_frac: 0.1,
            flip_p: 0.0,
            min_nontie_frac: 0.2,
            import_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_steps: usize,
    /// Independent samples averaged per holdout item.
    pub samples_per_item: usize,
    /// Draws per pair for implicit-accuracy reports.
    pub accuracy_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_steps: 40,
            samples_per_item: 2,
            accuracy_draws: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub ladder: Vec<f64>,
    pub items: usize,
    pub draws_per_item: usize,
    /// Segment index to corrupt.
    pub corrupt_segment: usize,
    pub kind: ArtifactKind,
    pub shared_noise: bool,
    /// Position-match tolerance for region partitions.
    pub tol: f64,
    /// Dump per-position difference maps for the first N items
    /// (0 disables the dump).
    pub dump_items: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ladder: vec![0.0, 2.0, 4.0, 8.0, 16.0],
            items: 256,
            draws_per_item: 2,
            corrupt_segment: 2,
            kind: ArtifactKind::SmoothingBlur,
            shared_noise: true,
            tol: 1e-6,
            dump_items: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub flip_rates: Vec<f64>,
    pub quantity_factors: Vec<f64>,
    pub seg_lengths: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            flip_rates: vec![0.0, 0.2, 0.4],
            quantity_factors: vec![0.5, 1.0, 2.0],
            seg_lengths: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub pairs: PairGenConfig,
    pub annotate: AnnotateConfig,
    pub dpo: DpoConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.as_ref().display()))
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            t_len: self.world.t_len,
            d_len: self.world.d_len,
            window: self.model.window,
            time_emb: self.model.time_emb,
            cond_dim: COND_DIM,
            hidden: self.model.hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        if self.world.seg_frames == 0 || self.world.seg_frames > self.world.t_len {
            return Err(Error::Config("seg_frames must be in 1..=t_len".into()));
        }
        if self.world.strata_weights.len() != self.world.lattice.n_strata() {
            return Err(Error::Config(
                "strata_weights length must match the lattice".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pairs.eta_min)
            || !(0.0..=1.0).contains(&self.pairs.eta_max)
            || self.pairs.eta_min > self.pairs.eta_max
        {
            return Err(Error::Config(
                "eta range must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        if self.pairs.n_steps == 0 {
            return Err(Error::Config("pairs.n_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.annotate.flip_p) {
            return Err(Error::Config("flip_p must be in [0,1]".into()));
        }
        if self.probe.corrupt_segment * self.world.seg_frames >= self.world.t_len {
            return Err(Error::Config("probe.corrupt_segment outside the clip".into()));
        }
        self.dpo.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::default();
        let json = cfg.to_json();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // and a second serialize is byte-identical
        assert_eq!(json, back.to_json());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        // nested sections too
        let err = serde_json::from_str::<RunConfig>(r#"{"world": {"t_len": 24, "oops": 1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("oops"));
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.world.t_len, 24);
        assert_eq!(cfg.dpo.beta, 500.0);
    }
}
