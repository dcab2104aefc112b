//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::net::{GradientStore, VelocityNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(net: &VelocityNet, weight_decay: f64, clip: f64) -> Self {
        let shapes = net.param_shapes();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
            step: 0,
            m: shapes.iter().cloned().map(Tensor::zeros).collect(),
            v: shapes.into_iter().map(Tensor::zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clip gradients to the global norm budget, update moments, apply one
    /// AdamW step. A non-finite gradient rejects the whole step and leaves
    /// parameters and moments untouched.
    pub fn step(&mut self, net: &mut VelocityNet, grads: &GradientStore, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at optimizer step {} (step rejected)",
                self.step
            )));
        }
        let gnorm = grads.global_norm();
        let scale = if self.clip > 0.0 && gnorm > self.clip {
            self.clip / gnorm
        } else {
            1.0
        };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for ((param, grad), (m, v)) in net
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad.data()[i] * scale;
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let p = &mut param.data_mut()[i];
                // decoupled decay, then the Adam step
                *p -= lr * self.weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from zero: `lr(0) = 0`, reaching `peak` at `warmup` steps,
/// constant afterwards.
pub fn warmup_lr(step: u64, peak: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        peak
    } else {
        peak * ((step as f64 / warmup as f64).min(1.0))
    }
}

/// Effective gradient after global-norm clipping, exposed for tests.
pub fn clipped(grads: &GradientStore, clip: f64) -> GradientStore {
    let mut out = grads.clone();
    let gnorm = out.global_norm();
    if clip > 0.0 && gnorm > clip {
        out.scale_in_place(clip / gnorm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn small_net() -> VelocityNet {
        VelocityNet::init(
            NetConfig {
                t_len: 4,
                d_len: 3,
                window: 1,
                time_emb: 2,
                cond_dim: 1,
                hidden: vec![4],
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let mut net = small_net();
        let before = net.clone();
        let grads = GradientStore::zeros_like(&net);
        let mut opt = AdamW::new(&net, 0.0, 1.0);
        opt.step(&mut net, &grads, 1e-2).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn clipping_scales_by_norm_ratio() {
        let net = small_net();
        let mut grads = GradientStore::zeros_like(&net);
        // put all mass in one entry so the global norm is exactly 10
        grads.tensors[0].data_mut()[0] = 10.0;
        let clipped = clipped(&grads, 1.0);
        assert!((clipped.tensors[0].data()[0] - 1.0).abs() < 1e-12);
        assert!(clipped.global_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn unclipped_when_under_budget() {
        let net = small_net();
        let mut grads = GradientStore::zeros_like(&net);
        grads.tensors[0].data_mut()[0] = 0.5;
        let c = clipped(&grads, 1.0);
        assert_eq!(c.tensors[0].data()[0], 0.5);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut net = small_net();
        let before = net.clone();
        let mut grads = GradientStore::zeros_like(&net);
        grads.tensors[1].data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(&net, 0.0, 1.0);
        assert!(matches!(
            opt.step(&mut net, &grads, 1e-2),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(net, before, "rejected step must not touch params");
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn quadratic_objective_drops_100x_in_200_steps() {
        // f(w) = 0.5 * ||w - target||^2, gradient w - target
        let mut net = small_net();
        let target: Vec<Tensor> = net
            .param_shapes()
            .into_iter()
            .map(|s| Tensor::filled(s, 0.25))
            .collect();
        let objective = |net: &VelocityNet| -> f64 {
            net.named_params()
                .iter()
                .zip(&target)
                .map(|((_, p), t)| {
                    p.data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| 0.5 * (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum()
        };
        let initial = objective(&net);
        let mut opt = AdamW::new(&net, 0.0, 0.0);
        for _ in 0..200 {
            let grads = GradientStore {
                tensors: net
                    .named_params()
                    .iter()
                    .zip(&target)
                    .map(|((_, p), t)| p.sub(t).unwrap())
                    .collect(),
            };
            opt.step(&mut net, &grads, 0.05).unwrap();
        }
        let fin = objective(&net);
        assert!(
            fin * 100.0 < initial,
            "initial {initial}, final {fin}"
        );
    }

    #[test]
    fn warmup_schedule_starts_at_zero() {
        assert_eq!(warmup_lr(0, 1e-3, 100), 0.0);
        assert!((warmup_lr(50, 1e-3, 100) - 5e-4).abs() < 1e-18);
        assert_eq!(warmup_lr(100, 1e-3, 100), 1e-3);
        assert_eq!(warmup_lr(250, 1e-3, 100), 1e-3);
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut net = small_net();
            let mut grads = GradientStore::zeros_like(&net);
            for t in &mut grads.tensors {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = (i as f64 * 0.37).sin();
                }
            }
            let mut opt = AdamW::new(&net, 0.01, 1.0);
            for _ in 0..5 {
                opt.step(&mut net, &grads, 1e-3).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
