//! First-order optimizers with a non-committing preview used by the
//! gradient-inundation search. Every update takes a gradient multiplier `kappa`;
//! the scaled gradient `kappa * g` is what enters the moment buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Momentum SGD; `nesterov` follows the PyTorch formulation.
    Sgd {
        momentum: f64,
        nesterov: bool,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    RmsProp {
        alpha: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.0,
            nesterov: false,
        }
    }

    pub fn nesterov(momentum: f64) -> Self {
        OptimizerKind::Sgd {
            momentum,
            nesterov: true,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp {
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            slots: Vec::new(),
        }
    }

    fn slot(&self, idx: usize) -> Option<&Slot> {
        self.slots.get(idx).filter(|s| s.steps > 0)
    }

    /// Parameters the optimizer would produce from gradient `kappa * g`, without
    /// touching any buffer.
    pub fn preview(&self, idx: usize, theta: &[f64], g: &[f64], kappa: f64) -> Result<Vec<f64>> {
        let mut out = theta.to_vec();
        self.apply(self.slot(idx), &mut out, g, kappa)?;
        Ok(out)
    }

    /// Commits one update of parameter `idx` in place. On a non-finite result
    /// neither `theta` nor the buffers change.
    pub fn step(&mut self, idx: usize, theta: &mut [f64], g: &[f64], kappa: f64) -> Result<()> {
        let mut next = theta.to_vec();
        let slot = self.apply(self.slot(idx), &mut next, g, kappa)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "parameter {idx} after step"
            )));
        }
        theta.copy_from_slice(&next);
        if self.slots.len() <= idx {
            self.slots.resize(idx + 1, Slot::default());
        }
        self.slots[idx] = slot;
        Ok(())
    }

    fn apply(&self, prev: Option<&Slot>, theta: &mut [f64], g: &[f64], kappa: f64) -> Result<Slot> {
        if theta.len() != g.len() {
            return Err(shape_err!(
                "{} parameters vs {} gradients",
                theta.len(),
                g.len()
            ));
        }
        let n = theta.len();
        if let Some(p) = prev {
            for b in [&p.first, &p.second] {
                if !b.is_empty() && b.len() != n {
                    return Err(shape_err!("buffer of {} for {} parameters", b.len(), n));
                }
            }
        }
        let steps = prev.map_or(0, |p| p.steps) + 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum, nesterov } => {
                if momentum == 0.0 {
                    for i in 0..n {
                        theta[i] -= lr * (kappa * g[i]);
                    }
                    return Ok(Slot {
                        steps,
                        ..Slot::default()
                    });
                }
                let mut buf = vec![0.0; n];
                for i in 0..n {
                    let gi = kappa * g[i];
                    buf[i] = match prev {
                        Some(p) => momentum * p.first[i] + gi,
                        None => gi,
                    };
                    let d = if nesterov {
                        gi + momentum * buf[i]
                    } else {
                        buf[i]
                    };
                    theta[i] -= lr * d;
                }
                Ok(Slot {
                    first: buf,
                    second: Vec::new(),
                    steps,
                })
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = steps;
                let bc1 = 1.0 - libm::pow(beta1, t as f64);
                let bc2 = 1.0 - libm::pow(beta2, t as f64);
                let mut m = vec![0.0; n];
                let mut v = vec![0.0; n];
                for i in 0..n {
                    let gi = kappa * g[i];
                    let (m0, v0) = prev.map_or((0.0, 0.0), |p| (p.first[i], p.second[i]));
                    m[i] = beta1 * m0 + (1.0 - beta1) * gi;
                    v[i] = beta2 * v0 + (1.0 - beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    theta[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
                }
                Ok(Slot {
                    first: m,
                    second: v,
                    steps,
                })
            }
            OptimizerKind::RmsProp { alpha, eps } => {
                let mut v = vec![0.0; n];
                for i in 0..n {
                    let gi = kappa * g[i];
                    let v0 = prev.map_or(0.0, |p| p.second[i]);
                    v[i] = alpha * v0 + (1.0 - alpha) * gi * gi;
                    theta[i] -= lr * gi / (libm::sqrt(v[i]) + eps);
                }
                Ok(Slot {
                    first: Vec::new(),
                    second: v,
                    steps,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut o = OptimizerState::new(OptimizerKind::sgd(), 0.1);
        let mut th = [1.0];
        o.step(0, &mut th, &[1.0], 1.0).unwrap();
        assert!((th[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn preview_kappa_zero_and_one() {
        let o = OptimizerState::new(OptimizerKind::sgd(), 0.05);
        let th = [0.3, -0.2];
        let g = [1.0, -4.0];
        assert_eq!(o.preview(0, &th, &g, 0.0).unwrap(), th.to_vec());
        let p = o.preview(0, &th, &g, 1.0).unwrap();
        assert_eq!(p, vec![0.3 - 0.05 * 1.0, -0.2 - 0.05 * -4.0]);
    }

    #[test]
    fn nesterov_matches_hand_recurrence() {
        let mu = 0.9;
        let lr = 0.01;
        let grads = [[1.0, -2.0], [0.5, 0.5], [-1.0, 3.0]];
        let kappas = [1.0, 2.0, 4.0];
        let mut o = OptimizerState::new(OptimizerKind::nesterov(mu), lr);
        let mut th = [0.5, -0.5];
        // hand recurrence
        let mut hb = [0.0f64; 2];
        let mut ht = [0.5f64, -0.5];
        for (s, (g, k)) in grads.iter().zip(kappas).enumerate() {
            let before = o.clone();
            let pv = o.preview(0, &th, g, k).unwrap();
            assert_eq!(o, before, "preview mutated state");
            o.step(0, &mut th, g, k).unwrap();
            assert_eq!(pv, th.to_vec());
            for i in 0..2 {
                let gi = k * g[i];
                hb[i] = if s == 0 { gi } else { mu * hb[i] + gi };
                ht[i] -= lr * (gi + mu * hb[i]);
            }
            assert_eq!(ht, th);
        }
    }

    #[test]
    fn adam_first_step() {
        let lr = 1e-3;
        let mut o = OptimizerState::new(OptimizerKind::adam(), lr);
        let mut th = [2.0];
        o.step(0, &mut th, &[1.0], 1.0).unwrap();
        // m̂ = 1, v̂ = 1 on the first step
        assert!((th[0] - (2.0 - lr / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_gradient() {
        let mut o = OptimizerState::new(OptimizerKind::rmsprop(), 0.01);
        let mut th = [1.5, -2.0];
        o.step(0, &mut th, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(th, [1.5, -2.0]);
    }

    #[test]
    fn preview_leaves_adam_buffers() {
        let mut o = OptimizerState::new(OptimizerKind::adam(), 0.1);
        let mut th = [1.0, 2.0];
        o.step(0, &mut th, &[0.3, -0.1], 1.0).unwrap();
        let snap = o.clone();
        let p = o.preview(0, &th, &[1.0, 1.0], 8.0).unwrap();
        assert_eq!(o, snap);
        let mut th2 = th;
        o.step(0, &mut th2, &[1.0, 1.0], 8.0).unwrap();
        assert_eq!(p, th2.to_vec());
    }

    #[test]
    fn shape_mismatch() {
        let mut o = OptimizerState::new(OptimizerKind::sgd(), 0.1);
        assert!(o.step(0, &mut [1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn non_finite_step_is_error() {
        let mut o = OptimizerState::new(OptimizerKind::sgd(), 1.0);
        assert!(o.step(0, &mut [1.0], &[f64::MAX], 10.0).is_err());
    }
}
