//! The toy velocity-prediction network.
//!
//! An MLP that denoises one frame at a time: its input is the concatenation
//! of a sliding window of `window` noisy frames (zero-padded at the clip
//! boundaries), a sinusoidal embedding of the noise level `t`, and the
//! conditioning vector. Its output is the predicted velocity of the window's
//! center frame. Running it over every frame index yields a `[T, D]`
//! velocity prediction, which keeps per-frame loss attribution well defined
//! while still giving each frame a temporal receptive field.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Grads, NodeId, Tape};
use crate::tensor::{matmul, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub t_len: usize,
    pub d_len: usize,
    /// Temporal window width, odd.
    pub window: usize,
    pub time_emb: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            t_len: 24,
            d_len: 16,
            window: 3,
            time_emb: 8,
            cond_dim: 5,
            hidden: vec![64, 64],
        }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.window * self.d_len + self.time_emb + self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config("window must be odd and positive".into()));
        }
        if self.t_len == 0 || self.d_len == 0 {
            return Err(Error::Config("t_len and d_len must be positive".into()));
        }
        if self.time_emb % 2 != 0 {
            return Err(Error::Config("time_emb must be even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t` at geometrically spaced frequencies. Any
/// smooth injective embedding of (0,1) works; this one is standard.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = std::f64::consts::PI * (1 << k) as f64;
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Anything that predicts a `[T, D]` velocity field from a noisy clip.
/// Implemented by [`VelocityNet`]; tests also implement it with closed-form
/// oracles.
pub trait Denoiser {
    fn velocity(&self, noisy: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub cfg: NetConfig,
    pub layers: Vec<Linear>,
}

impl VelocityNet {
    /// Scaled uniform fan-in initialization, fully determined by `seed`.
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut dims = vec![cfg.input_dim()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.d_len);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(Linear {
                weight: Tensor::new(vec![fan_in, fan_out], data)?,
                bias: Tensor::zeros(vec![fan_out]),
            });
        }
        Ok(Self { cfg, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Canonical parameter order: layer0.weight, layer0.bias, layer1.weight...
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            out.push((format!("layer{i}.bias"), &l.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }

    /// Assemble the `[T, input_dim]` batch of per-frame inputs.
    pub fn assemble_input(&self, noisy: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        if noisy.shape() != [cfg.t_len, cfg.d_len] {
            return Err(Error::Config(format!(
                "noisy clip shape {:?}, expected [{}, {}]",
                noisy.shape(),
                cfg.t_len,
                cfg.d_len
            )));
        }
        if cond.shape() != [cfg.cond_dim] {
            return Err(Error::Config(format!(
                "cond shape {:?}, expected [{}]",
                cond.shape(),
                cfg.cond_dim
            )));
        }
        // training noise levels are strictly interior; the Euler schedule
        // additionally evaluates at t = 1 (pure noise)
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("t = {t} outside (0,1]")));
        }
        let half = (cfg.window / 2) as isize;
        let emb = time_embedding(t, cfg.time_emb);
        let mut rows = Vec::with_capacity(cfg.t_len);
        for f in 0..cfg.t_len as isize {
            let mut row = Vec::with_capacity(cfg.input_dim());
            for off in -half..=half {
                let src = f + off;
                if src < 0 || src >= cfg.t_len as isize {
                    row.extend(std::iter::repeat(0.0).take(cfg.d_len));
                } else {
                    row.extend_from_slice(noisy.row(src as usize));
                }
            }
            row.extend_from_slice(&emb);
            row.extend_from_slice(cond.data());
            rows.push(row);
        }
        Tensor::from_rows(&rows)
    }

    /// Plain forward pass, `[T, D]` predicted velocity.
    pub fn forward(&self, noisy: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        let mut h = self.assemble_input(noisy, t, cond)?;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = matmul(&h, &l.weight)?;
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (v, &b) in row.iter_mut().zip(l.bias.data()) {
                    *v += b;
                }
            }
            h = if i + 1 < self.layers.len() {
                z.map(f64::tanh)
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Bind all parameters onto a tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let ids = self
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        BoundNet { ids }
    }

    /// Forward pass recorded on a tape, differentiable w.r.t. the bound
    /// parameters. The noisy clip and conditioning enter as constants.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        noisy: &Tensor,
        t: f64,
        cond: &Tensor,
    ) -> Result<NodeId> {
        let x = self.assemble_input(noisy, t, cond)?;
        let mut h = tape.constant(x);
        let n = bound.ids.len();
        for (i, &(w, b)) in bound.ids.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let zb = tape.add_row(z, b)?;
            h = if i + 1 < n { tape.tanh(zb) } else { zb };
        }
        Ok(h)
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = vec![("meta/arch".into(), self.arch_tensor())];
        for (name, t) in self.named_params() {
            tensors.push((name, t.clone()));
        }
        checkpoint::write_tensors(path, &tensors)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let tensors = checkpoint::read_tensors(path)?;
        let arch = tensors
            .iter()
            .find(|(n, _)| n == "meta/arch")
            .ok_or_else(|| Error::Checkpoint("missing meta/arch".into()))?;
        let cfg = Self::cfg_from_arch(&arch.1)?;
        let mut net = Self::init(cfg, 0)?;
        for (i, l) in net.layers.iter_mut().enumerate() {
            let wname = format!("layer{i}.weight");
            let bname = format!("layer{i}.bias");
            let w = tensors
                .iter()
                .find(|(n, _)| *n == wname)
                .ok_or_else(|| Error::Checkpoint(format!("missing {wname}")))?;
            let b = tensors
                .iter()
                .find(|(n, _)| *n == bname)
                .ok_or_else(|| Error::Checkpoint(format!("missing {bname}")))?;
            if w.1.shape() != l.weight.shape() || b.1.shape() != l.bias.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for layer {i}")));
            }
            l.weight = w.1.clone();
            l.bias = b.1.clone();
        }
        Ok(net)
    }

    fn arch_tensor(&self) -> Tensor {
        let c = &self.cfg;
        let mut v = vec![
            c.t_len as f64,
            c.d_len as f64,
            c.window as f64,
            c.time_emb as f64,
            c.cond_dim as f64,
            c.hidden.len() as f64,
        ];
        v.extend(c.hidden.iter().map(|&h| h as f64));
        Tensor::new(vec![v.len()], v).expect("arch tensor")
    }

    fn cfg_from_arch(t: &Tensor) -> Result<NetConfig> {
        let d = t.data();
        if d.len() < 6 {
            return Err(Error::Checkpoint("meta/arch too short".into()));
        }
        let n_hidden = d[5] as usize;
        if d.len() != 6 + n_hidden {
            return Err(Error::Checkpoint("meta/arch length mismatch".into()));
        }
        Ok(NetConfig {
            t_len: d[0] as usize,
            d_len: d[1] as usize,
            window: d[2] as usize,
            time_emb: d[3] as usize,
            cond_dim: d[4] as usize,
            hidden: d[6..].iter().map(|&h| h as usize).collect(),
        })
    }
}

impl Denoiser for VelocityNet {
    fn velocity(&self, noisy: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        self.forward(noisy, t, cond)
    }
}

/// Tape handles for one binding of the network parameters.
pub struct BoundNet {
    ids: Vec<(NodeId, NodeId)>,
}

impl BoundNet {
    /// Collect gradients in canonical parameter order. Parameters the loss
    /// never touched come back as exact zeros.
    pub fn collect_grads(&self, net: &VelocityNet, grads: &Grads) -> GradientStore {
        let mut out = Vec::with_capacity(self.ids.len() * 2);
        for (i, &(w, b)) in self.ids.iter().enumerate() {
            out.push(
                grads
                    .get(w)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(net.layers[i].weight.shape().to_vec())),
            );
            out.push(
                grads
                    .get(b)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(net.layers[i].bias.shape().to_vec())),
            );
        }
        GradientStore { tensors: out }
    }
}

/// One gradient tensor per parameter tensor, in canonical order.
#[derive(Debug, Clone)]
pub struct GradientStore {
    pub tensors: Vec<Tensor>,
}

impl GradientStore {
    pub fn zeros_like(net: &VelocityNet) -> Self {
        Self {
            tensors: net
                .param_shapes()
                .into_iter()
                .map(Tensor::zeros)
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn add_in_place(&mut self, other: &GradientStore) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}
