//! Gradient inundation: per-layer gradient scaling so that a target number of
//! quantized weights change their integer code on every step.
//!
//! For a quantized layer with `dim` weights the target is `T = ρ · dim`. The
//! multiplier κ starts at 1 and doubles until the previewed update flips more
//! than `T` codes, then a bounded bisection inside `[κ/2, κ]` looks for the
//! candidate whose flip count is closest to `T`. Flip counts are measured against
//! the layer's current codes under its current scale and zero offset.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamId};
use crate::optim::OptimizerState;
use crate::quant::{count_threshold_crossings, quantize, QuantConfig, QuantizedLayerState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiConfig {
    pub rho0: f64,
    pub decay_factor: f64,
    /// Epochs between decays of ρ.
    pub decay_interval: usize,
    pub warmup_epochs: usize,
    /// Upper bound on κ while in warm-up.
    pub kappa_cap_warmup: f64,
    /// Bisection iterations after the doubling phase.
    pub search_budget: u32,
    /// Maximum doublings outside warm-up (κ ≤ 2^doubling_cap).
    pub doubling_cap: u32,
    /// Prefer candidates that strictly exceed the target.
    pub constrained: bool,
}

impl Default for GiConfig {
    fn default() -> Self {
        Self {
            rho0: 0.01,
            decay_factor: 0.1,
            decay_interval: 100,
            warmup_epochs: 20,
            kappa_cap_warmup: 128.0,
            search_budget: 5,
            doubling_cap: 40,
            constrained: true,
        }
    }
}

impl GiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho0) {
            return Err(Error::Invalid("rho0 must lie in [0, 1]".into()));
        }
        if self.decay_interval == 0 || self.kappa_cap_warmup < 1.0 || self.doubling_cap == 0 {
            return Err(Error::Invalid(
                "GI caps and intervals must be positive".into(),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Invalid("decay factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `ρ0 · factor^⌊epoch / interval⌋`.
pub fn rho_schedule(epoch: usize, cfg: &GiConfig) -> f64 {
    cfg.rho0 * libm::pow(cfg.decay_factor, (epoch / cfg.decay_interval) as f64)
}

/// `T = ρ · dim(θ_l)`, kept real-valued.
pub fn target_count(rho: f64, dim: usize) -> f64 {
    rho * dim as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerUpdateReport {
    pub layer: usize,
    pub kappa: f64,
    /// Codes flipped by the committed candidate.
    pub crossings: usize,
    pub target: f64,
    pub dim: usize,
    pub doublings: u32,
    /// Bisection iterations used.
    pub search_steps: u32,
    pub capped: bool,
    pub zero_grad: bool,
}

impl LayerUpdateReport {
    /// The step-level contract: the target is exceeded, or the search hit its cap,
    /// or there was nothing to scale.
    pub fn satisfies_guarantee(&self) -> bool {
        self.target <= 0.0 || self.crossings as f64 > self.target || self.capped || self.zero_grad
    }
}

/// Runs the doubling-then-bisection search for one layer.
///
/// `param` selects the optimizer buffer of the layer's weights.
pub fn search_kappa(
    layer: &QuantizedLayerState,
    grad: &[f64],
    opt: &OptimizerState,
    param: usize,
    target: f64,
    cfg: &GiConfig,
    in_warmup: bool,
) -> Result<LayerUpdateReport> {
    let theta = layer.weights.data();
    let count = |kappa: f64| -> Result<usize> {
        let cand = opt.preview(param, theta, grad, kappa)?;
        let codes = quantize(&cand, &layer.params)?;
        count_threshold_crossings(&layer.codes, &codes)
    };
    let mut report = LayerUpdateReport {
        layer: layer.layer,
        kappa: 1.0,
        crossings: 0,
        target,
        dim: layer.dim(),
        doublings: 0,
        search_steps: 0,
        capped: false,
        zero_grad: grad.iter().all(|&g| g == 0.0),
    };
    let c1 = count(1.0)?;
    report.crossings = c1;
    if report.zero_grad || target <= 0.0 || c1 as f64 > target {
        return Ok(report);
    }

    let cap = if in_warmup {
        cfg.kappa_cap_warmup
    } else {
        libm::ldexp(1.0, cfg.doubling_cap as i32)
    };
    let mut seen: Vec<(f64, usize)> = alloc::vec![(1.0, c1)];
    let mut kappa = 1.0;
    let mut c = c1;
    while c as f64 <= target {
        if kappa * 2.0 > cap {
            report.capped = true;
            break;
        }
        kappa *= 2.0;
        report.doublings += 1;
        c = count(kappa)?;
        seen.push((kappa, c));
    }

    if !report.capped {
        let mut lo = kappa / 2.0;
        let mut hi = kappa;
        for _ in 0..cfg.search_budget {
            let mid = 0.5 * (lo + hi);
            let cm = count(mid)?;
            report.search_steps += 1;
            seen.push((mid, cm));
            if cm as f64 > target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }

    let (k, cnt) = select_candidate(&seen, target, cfg.constrained);
    report.kappa = k;
    report.crossings = cnt;
    Ok(report)
}

/// Closest flip count to `target`; with `constrained`, candidates above the target
/// win whenever one exists. Ties go to the smaller κ.
fn select_candidate(seen: &[(f64, usize)], target: f64, constrained: bool) -> (f64, usize) {
    let better = |a: &(f64, usize), b: &(f64, usize)| {
        let da = (a.1 as f64 - target).abs();
        let db = (b.1 as f64 - target).abs();
        da < db || (da == db && a.0 < b.0)
    };
    let pick = |pred: &dyn Fn(&(f64, usize)) -> bool| {
        seen.iter()
            .filter(|c| pred(c))
            .fold(None::<(f64, usize)>, |best, c| match best {
                Some(b) if !better(c, &b) => Some(b),
                _ => Some(*c),
            })
    };
    if constrained {
        if let Some(b) = pick(&|c| c.1 as f64 > target) {
            return b;
        }
    }
    pick(&|_| true).expect("at least one candidate")
}

/// A quantized weight tensor inside a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiLayer {
    pub param: ParamId,
    pub config: QuantConfig,
}

/// One optimizer step over every parameter of `graph`. Quantized layers listed in
/// `layers` get their κ from [`search_kappa`]; everything else steps with κ = 1.
/// With `rho == 0` this is exactly a plain optimizer step.
pub fn gi_step(
    graph: &mut Graph,
    grads: &Gradients,
    opt: &mut OptimizerState,
    layers: &[GiLayer],
    rho: f64,
    cfg: &GiConfig,
    in_warmup: bool,
) -> Result<Vec<LayerUpdateReport>> {
    let mut reports = Vec::with_capacity(layers.len());
    for p in 0..graph.params().len() {
        let g = grads.params[p].data();
        let kappa = match layers.iter().position(|l| l.param == p) {
            Some(li) => {
                let state =
                    QuantizedLayerState::from_weights(li, graph.param_value(p), layers[li].config)?;
                let target = target_count(rho, state.dim());
                let rep = search_kappa(&state, g, opt, p, target, cfg, in_warmup)?;
                reports.push(rep);
                rep.kappa
            }
            None => 1.0,
        };
        let theta = graph.param_data_mut(p);
        opt.step(p, theta, g, kappa).map_err(|e| match e {
            Error::NonFinite(_) => {
                Error::Diverged(alloc::format!("parameter {p} non-finite after step"))
            }
            other => other,
        })?;
    }
    Ok(reports)
}

/// Plain optimizer step over every parameter (κ = 1).
pub fn plain_step(graph: &mut Graph, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    for p in 0..graph.params().len() {
        let theta = graph.param_data_mut(p);
        opt.step(p, theta, grads.params[p].data(), 1.0)
            .map_err(|e| match e {
                Error::NonFinite(_) => {
                    Error::Diverged(alloc::format!("parameter {p} non-finite after step"))
                }
                other => other,
            })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::rng::SeedRng;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn layer(theta: &[f64], bits: u32) -> QuantizedLayerState {
        QuantizedLayerState::from_weights(0, &Tensor::vector(theta), QuantConfig::weights(bits))
            .unwrap()
    }

    #[test]
    fn rho_schedule_examples() {
        let cfg = GiConfig {
            rho0: 0.001,
            ..Default::default()
        };
        assert_eq!(rho_schedule(0, &cfg), 0.001);
        assert!((rho_schedule(100, &cfg) - 0.0001).abs() < 1e-18);
        assert!((rho_schedule(250, &cfg) - 0.00001).abs() < 1e-18);
        assert_eq!(rho_schedule(99, &cfg), 0.001);
    }

    #[test]
    fn target_examples() {
        assert!((target_count(0.001, 10_000) - 10.0).abs() < 1e-12);
        assert_eq!(target_count(0.0, 500), 0.0);
        assert_eq!(target_count(1.0, 64), 64.0);
    }

    #[test]
    fn large_gradient_needs_no_scaling() {
        let l = layer(&[-1.0, -0.5, 0.0, 0.5, 1.0], 4);
        let opt = OptimizerState::new(OptimizerKind::sgd(), 1.0);
        let g = [0.0, 0.3, -0.3, 0.3, 0.0];
        let r = search_kappa(&l, &g, &opt, 0, 1.5, &GiConfig::default(), false).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.search_steps, 0);
        assert_eq!(r.doublings, 0);
        assert!(r.crossings > 1);
    }

    #[test]
    fn zero_gradient() {
        let l = layer(&[-1.0, 0.2, 1.0], 4);
        let opt = OptimizerState::new(OptimizerKind::sgd(), 0.1);
        let r = search_kappa(&l, &[0.0; 3], &opt, 0, 1.0, &GiConfig::default(), false).unwrap();
        assert_eq!(
            (r.kappa, r.crossings, r.capped, r.zero_grad),
            (1.0, 0, false, true)
        );
        assert!(r.satisfies_guarantee());
    }

    #[test]
    fn warmup_cap_and_large_cap() {
        let l = layer(&[-1.0, -0.2, 0.2, 0.6, 1.0], 4);
        let opt = OptimizerState::new(OptimizerKind::sgd(), 1e-9);
        let g = [0.0, 1.0, 1.0, -1.0, 0.0];
        let cfg = GiConfig::default();
        let r = search_kappa(&l, &g, &opt, 0, 2.0, &cfg, true).unwrap();
        assert!(r.capped);
        assert_eq!(r.doublings, 7);
        // nothing moved at any candidate, so the tie goes to the smallest κ
        assert_eq!((r.kappa, r.crossings), (1.0, 0));
        assert!(r.satisfies_guarantee());
        let r = search_kappa(&l, &g, &opt, 0, 2.0, &cfg, false).unwrap();
        assert!(!r.capped);
        assert!(r.crossings > 2);
        assert!(r.kappa <= libm::ldexp(1.0, 40));
    }

    /// Exhaustive replay of the doubling + bisection rule, coded without the
    /// optimizer or quantizer modules.
    #[test]
    fn five_parameter_hand_case() {
        let theta = [-1.0, -0.41, 0.03, 0.37, 1.0];
        let g = [0.0, -0.02, 0.05, -0.01, 0.0];
        let lr = 0.1;
        let l = layer(&theta, 4);
        let opt = OptimizerState::new(OptimizerKind::sgd(), lr);
        let cfg = GiConfig::default();
        let t = 2.0;
        let r = search_kappa(&l, &g, &opt, 0, t, &cfg, false).unwrap();

        let s = 15.0 / 2.0;
        let z = s * -1.0 + 8.0;
        let code = |x: f64| (libm::rint(x * s - z)).clamp(-8.0, 7.0) as i32;
        let flips = |k: f64| {
            theta
                .iter()
                .zip(&g)
                .filter(|(th, gg)| code(**th) != code(**th - lr * k * **gg))
                .count()
        };
        let mut seen = vec![];
        let mut k = 1.0;
        seen.push((k, flips(k)));
        while flips(k) as f64 <= t {
            k *= 2.0;
            seen.push((k, flips(k)));
        }
        let (mut lo, mut hi) = (k / 2.0, k);
        for _ in 0..5 {
            let m = (lo + hi) / 2.0;
            let c = flips(m);
            seen.push((m, c));
            if c as f64 > t {
                hi = m
            } else {
                lo = m
            }
        }
        let best = seen
            .iter()
            .filter(|c| c.1 as f64 > t)
            .min_by(|a, b| a.1.cmp(&b.1).then(a.0.partial_cmp(&b.0).unwrap()))
            .unwrap();
        assert_eq!(r.kappa, best.0);
        assert_eq!(r.crossings, best.1);
        assert!(r.crossings as f64 > t);
    }

    #[test]
    fn unconstrained_may_undershoot() {
        let seen = [(1.0, 2), (2.0, 9), (1.5, 4)];
        assert_eq!(select_candidate(&seen, 3.0, true), (1.5, 4));
        assert_eq!(select_candidate(&seen, 3.0, false), (1.0, 2));
    }

    fn noise_like(g: &Graph, r: &mut SeedRng, scale: f64) -> Gradients {
        let params = g
            .params()
            .iter()
            .map(|p| {
                let data = (0..p.value.len()).map(|_| scale * r.normal()).collect();
                Tensor::new(p.value.shape().to_vec(), data).unwrap()
            })
            .collect();
        Gradients {
            params,
            input: None,
        }
    }

    fn toy_graph(r: &mut SeedRng) -> (Graph, Vec<GiLayer>) {
        let mut g = Graph::new(3);
        let x = g.input();
        let w = g.param(
            "w",
            Tensor::matrix(3, 8, (0..24).map(|_| r.normal()).collect()).unwrap(),
        );
        let b = g.param("b", Tensor::zeros(&[8]));
        let h = g.dense(x, w, Some(b)).unwrap();
        g.add_node(crate::graph::Op::Sum(h)).unwrap();
        let layers = vec![GiLayer {
            param: 0,
            config: QuantConfig::weights(4),
        }];
        (g, layers)
    }

    #[test]
    fn rho_zero_is_plain_step_bitwise() {
        let mut r = SeedRng::new(2);
        let (g0, layers) = toy_graph(&mut r);
        let grads = noise_like(&g0, &mut r, 1.0);
        let mut a = g0.clone();
        let mut b = g0.clone();
        let mut oa = OptimizerState::new(OptimizerKind::nesterov(0.9), 0.01);
        let mut ob = oa.clone();
        for _ in 0..3 {
            gi_step(
                &mut a,
                &grads,
                &mut oa,
                &layers,
                0.0,
                &GiConfig::default(),
                false,
            )
            .unwrap();
            plain_step(&mut b, &grads, &mut ob).unwrap();
        }
        assert_eq!(a.flat_params(), b.flat_params());
    }

    #[test]
    fn committed_step_meets_target() {
        let mut r = SeedRng::new(3);
        let (mut g, layers) = toy_graph(&mut r);
        let mut opt = OptimizerState::new(OptimizerKind::nesterov(0.9), 1e-4);
        for _ in 0..10 {
            let grads = noise_like(&g, &mut r, 0.01);
            let before =
                QuantizedLayerState::from_weights(0, g.param_value(0), QuantConfig::weights(4))
                    .unwrap();
            let reps = gi_step(
                &mut g,
                &grads,
                &mut opt,
                &layers,
                0.2,
                &GiConfig::default(),
                false,
            )
            .unwrap();
            let rep = reps[0];
            assert!(rep.satisfies_guarantee());
            assert!(rep.kappa >= 1.0);
            assert!(rep.crossings as f64 > rep.target);
            // the report counts flips under the pre-step range
            let after = quantize(g.param_value(0).data(), &before.params).unwrap();
            assert_eq!(
                count_threshold_crossings(&before.codes, &after).unwrap(),
                rep.crossings
            );
        }
    }
}
