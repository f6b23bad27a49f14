//! Oracle suites shared by the `selftest` verb and the acceptance tests.
//! Every oracle here is coded independently of the routine it checks.

use std::time::Instant;

use zsq_core::diag::{explicit_hessian, hutchinson_trace, hvp, hvp_epsilon, lanczos_spectrum};
use zsq_core::gi::{search_kappa, GiConfig};
use zsq_core::graph::finite_diff_grad;
use zsq_core::optim::{OptimizerKind, OptimizerState};
use zsq_core::quant::{
    dequantize_scalar, quant_params, quantize_scalar, QuantConfig, QuantizedLayerState,
};
use zsq_core::rng::SeedRng;
use zsq_core::{Graph, Mode, NodeId, Op, Tensor};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn rand_tensor(r: &mut SeedRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * r.uniform_in(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

struct TinyGraph {
    graph: Graph,
    loss: NodeId,
    input: Tensor,
    relus: Vec<NodeId>,
}

/// Random stack of dense layers with mixed nonlinearities and a scalar head.
fn tiny_graph(r: &mut SeedRng) -> TinyGraph {
    loop {
        let inw = 2 + r.below(4);
        let batch = 3 + r.below(4);
        let depth = 1 + r.below(3);
        let mut g = Graph::new(inw);
        let mut h = g.input();
        let mut width = inw;
        let mut relus = Vec::new();
        for l in 0..depth {
            let out = 2 + r.below(6);
            let w = g.param(format!("w{l}"), rand_tensor(r, &[width, out], 1.0));
            let b =
                (r.below(2) == 0).then(|| g.param(format!("b{l}"), rand_tensor(r, &[out], 0.5)));
            h = g.dense(h, w, b).unwrap();
            match r.below(4) {
                0 => {
                    relus.push(h);
                    h = g.add_node(Op::Relu(h)).unwrap();
                }
                1 => h = g.add_node(Op::Tanh(h)).unwrap(),
                2 => h = g.batch_norm(h, out, &format!("bn{l}")).unwrap(),
                _ => {
                    let m = g.param(format!("m{l}"), rand_tensor(r, &[batch, out], 1.0));
                    h = g.add_node(Op::Mul(h, m)).unwrap();
                }
            }
            width = out;
        }
        let loss = if r.below(2) == 0 {
            let ls = g.add_node(Op::LogSoftmax(h)).unwrap();
            let y: Vec<f64> = (0..batch * width)
                .map(|i| {
                    if i % width == (i / width) % width {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let y = g.param("y", Tensor::matrix(batch, width, y).unwrap());
            let p = g.add_node(Op::Mul(ls, y)).unwrap();
            let s = g.add_node(Op::Sum(p)).unwrap();
            g.add_node(Op::Scale(s, -1.0 / batch as f64)).unwrap()
        } else {
            let t = g.add_node(Op::Tanh(h)).unwrap();
            let sq = g.add_node(Op::Mul(t, t)).unwrap();
            g.add_node(Op::Mean(sq)).unwrap()
        };
        if g.num_scalars() > 500 {
            continue;
        }
        let input = rand_tensor(r, &[batch, inw], 2.0);
        // Keep every ReLU away from its kink so central differences stay exact.
        let acts = g.eval_in(&input, Mode::Train).unwrap();
        if relus
            .iter()
            .any(|&n| acts.get(n).data().iter().any(|v| v.abs() < 1e-3))
        {
            continue;
        }
        return TinyGraph {
            graph: g,
            loss,
            input,
            relus,
        };
    }
}

/// Backward against central differences on random tiny graphs.
pub fn gradient_check(graphs: usize, seed: u64) -> Check {
    timed("gradient correctness", || {
        let mut r = SeedRng::new(seed);
        let mut worst = 0.0f64;
        for gi in 0..graphs {
            let t = tiny_graph(&mut r);
            let g = &t.graph;
            let acts = g
                .eval_in(&t.input, Mode::Train)
                .map_err(|e| e.to_string())?;
            let grads = g.backward(&acts, t.loss).map_err(|e| e.to_string())?;
            for p in 0..g.params().len() {
                let th = g.param_value(p).clone();
                let fd = finite_diff_grad(
                    |x| {
                        let mut gg = g.clone();
                        gg.set_param(p, x.clone())?;
                        Ok(gg.eval_in(&t.input, Mode::Train)?.get(t.loss).data()[0])
                    },
                    &th,
                    1e-6,
                )
                .map_err(|e| e.to_string())?;
                for (a, f) in grads.params[p].data().iter().zip(fd.data()) {
                    let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
            }
            let _ = &t.relus;
            if worst > 1e-5 {
                return Err(format!("graph {gi}: relative error {worst:.3e}"));
            }
        }
        Ok(format!("{graphs} graphs, max relative error {worst:.2e}"))
    })
}

/// Round-trip, monotonicity, level count, error bound and endpoint checks.
pub fn quantizer_suite(samples: usize, seed: u64) -> Check {
    timed("quantizer suite", || {
        let mut r = SeedRng::new(seed);
        for bits in [2u32, 3, 4, 8] {
            let lo = r.uniform_in(-3.0, 0.5);
            let hi = lo + r.uniform_in(0.01, 5.0);
            let p = quant_params(lo, hi, bits).map_err(|e| e.to_string())?;
            let qlo = -(1i32 << (bits - 1));
            let qhi = (1i32 << (bits - 1)) - 1;
            if quantize_scalar(lo, &p) != qlo || quantize_scalar(hi, &p) != qhi {
                return Err(format!("{bits}-bit endpoints map to wrong codes"));
            }
            let levels = ((1u64 << bits) - 1) as f64;
            let s = levels / (hi - lo);
            let mut xs: Vec<f64> = (0..samples).map(|_| r.uniform_in(lo, hi)).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut prev = i32::MIN;
            let mut seen = std::collections::BTreeSet::new();
            for &x in &xs {
                let q = quantize_scalar(x, &p);
                if q < prev {
                    return Err(format!("{bits}-bit quantizer not monotone at {x}"));
                }
                prev = q;
                seen.insert(q);
                let back = dequantize_scalar(q, &p);
                if quantize_scalar(back, &p) != q {
                    return Err(format!("{bits}-bit round trip moved code {q}"));
                }
                if (back - x).abs() > 0.5 / s * (1.0 + 1e-9) {
                    return Err(format!(
                        "{bits}-bit error {} above 1/(2S)",
                        (back - x).abs()
                    ));
                }
            }
            if seen.len() > 1 << bits {
                return Err(format!(
                    "{bits}-bit quantizer produced {} levels",
                    seen.len()
                ));
            }
        }
        Ok(format!("{samples} samples per bit-width"))
    })
}

#[derive(Clone, Copy)]
enum ReplayOpt {
    Sgd,
    /// Nesterov momentum with one committed step on `g0` beforehand.
    Nesterov {
        mu: f64,
    },
    Adam,
}

fn replay_candidate(
    opt: ReplayOpt,
    lr: f64,
    theta: &[f64],
    g: &[f64],
    g0: &[f64],
    kappa: f64,
) -> Vec<f64> {
    theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let gi = kappa * g[i];
            match opt {
                ReplayOpt::Sgd => t - lr * gi,
                ReplayOpt::Nesterov { mu } => {
                    let buf = mu * g0[i] + gi;
                    t - lr * (gi + mu * buf)
                }
                ReplayOpt::Adam => {
                    let (b1, b2) = (0.9f64, 0.999f64);
                    let m = (1.0 - b1) * gi;
                    let v = (1.0 - b2) * gi * gi;
                    let mhat = m / (1.0 - b1);
                    let vhat = v / (1.0 - b2);
                    t - lr * mhat / (vhat.sqrt() + 1e-8)
                }
            }
        })
        .collect()
}

fn replay_codes(w: &[f64], lo: f64, hi: f64, bits: u32) -> Vec<i64> {
    let (lo, hi) = if lo == hi {
        (lo - 1e-8, hi + 1e-8)
    } else {
        (lo, hi)
    };
    let s = ((1u64 << bits) - 1) as f64 / (hi - lo);
    let z = s * lo + (1u64 << (bits - 1)) as f64;
    let qmin = -(1i64 << (bits - 1));
    let qmax = (1i64 << (bits - 1)) - 1;
    w.iter()
        .map(|&x| ((x * s - z).round_ties_even() as i64).clamp(qmin, qmax))
        .collect()
}

/// Step-by-step re-enactment of the doubling plus bisection search.
#[allow(clippy::too_many_arguments)]
fn replay_kappa(
    opt: ReplayOpt,
    lr: f64,
    theta: &[f64],
    g: &[f64],
    g0: &[f64],
    bits: u32,
    target: f64,
    warmup: bool,
    constrained: bool,
) -> f64 {
    let lo = theta.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let base = replay_codes(theta, lo, hi, bits);
    let flips = |k: f64| {
        let c = replay_codes(&replay_candidate(opt, lr, theta, g, g0, k), lo, hi, bits);
        base.iter().zip(&c).filter(|(a, b)| a != b).count() as f64
    };
    let first = flips(1.0);
    if g.iter().all(|&x| x == 0.0) || target <= 0.0 || first > target {
        return 1.0;
    }
    let cap = if warmup { 128.0 } else { 2f64.powi(40) };
    let mut tried = vec![(1.0, first)];
    let mut k = 1.0;
    let mut hit = false;
    while 2.0 * k <= cap {
        k *= 2.0;
        let c = flips(k);
        tried.push((k, c));
        if c > target {
            hit = true;
            break;
        }
    }
    if hit {
        let (mut a, mut b) = (k / 2.0, k);
        for _ in 0..5 {
            let m = (a + b) / 2.0;
            let c = flips(m);
            tried.push((m, c));
            if c > target {
                b = m;
            } else {
                a = m;
            }
        }
    }
    let over: Vec<(f64, f64)> = tried.iter().cloned().filter(|c| c.1 > target).collect();
    let pool = if constrained && !over.is_empty() {
        over
    } else {
        tried
    };
    pool.into_iter()
        .min_by(|x, y| {
            let dx = (x.1 - target).abs();
            let dy = (y.1 - target).abs();
            dx.partial_cmp(&dy)
                .unwrap()
                .then(x.0.partial_cmp(&y.0).unwrap())
        })
        .unwrap()
        .0
}

/// `search_kappa` against the replay on random small layers.
pub fn kappa_oracle(layers: usize, seed: u64) -> Check {
    timed("kappa-search oracle", || {
        let mut r = SeedRng::new(seed);
        let mut mismatches = Vec::new();
        let (mut searched, mut capped) = (0, 0);
        for case in 0..layers {
            let n = 5 + r.below(46);
            let bits = [2u32, 3, 4, 8][r.below(4)];
            let theta: Vec<f64> = (0..n).map(|_| 0.3 * r.normal()).collect();
            let gscale = 10f64.powf(r.uniform_in(-4.0, 0.0));
            let g: Vec<f64> = (0..n).map(|_| gscale * r.normal()).collect();
            let g0: Vec<f64> = (0..n).map(|_| gscale * r.normal()).collect();
            let lr = 10f64.powf(r.uniform_in(-4.0, -1.0));
            let (ropt, kind) = match r.below(3) {
                0 => (ReplayOpt::Sgd, OptimizerKind::sgd()),
                1 => {
                    let mu = r.uniform_in(0.5, 0.95);
                    (ReplayOpt::Nesterov { mu }, OptimizerKind::nesterov(mu))
                }
                _ => (ReplayOpt::Adam, OptimizerKind::adam()),
            };
            let mut opt = OptimizerState::new(kind, lr);
            if let ReplayOpt::Nesterov { .. } = ropt {
                // Prime the momentum buffer; the scratch parameter copy is discarded.
                let mut scratch = theta.clone();
                opt.step(0, &mut scratch, &g0, 1.0)
                    .map_err(|e| e.to_string())?;
            }
            let target = (r.uniform_in(0.0, 0.6) * n as f64).floor();
            let warmup = r.below(2) == 0;
            let cfg = GiConfig {
                constrained: r.below(4) != 0,
                ..GiConfig::default()
            };
            let w = Tensor::vector(&theta);
            let layer = QuantizedLayerState::from_weights(0, &w, QuantConfig::weights(bits))
                .map_err(|e| e.to_string())?;
            let got = search_kappa(&layer, &g, &opt, 0, target, &cfg, warmup)
                .map_err(|e| e.to_string())?;
            let want = replay_kappa(
                ropt,
                lr,
                &theta,
                &g,
                &g0,
                bits,
                target,
                warmup,
                cfg.constrained,
            );
            searched += usize::from(got.kappa != 1.0);
            capped += usize::from(got.capped);
            if got.kappa != want {
                mismatches.push(format!("case {case}: κ {} vs replay {want}", got.kappa));
            }
        }
        if mismatches.is_empty() {
            Ok(format!(
                "{layers} layers, exact agreement ({searched} with κ ≠ 1, {capped} capped)"
            ))
        } else {
            Err(mismatches.join("; "))
        }
    })
}

fn random_orthogonal(r: &mut SeedRng, n: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-6 {
            q.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    q
}

/// Dense `Q diag(λ) Qᵀ`.
fn quadratic(r: &mut SeedRng, eig: &[f64]) -> Vec<f64> {
    let n = eig.len();
    let q = random_orthogonal(r, n);
    let mut a = vec![0.0; n * n];
    for (k, lam) in eig.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] += lam * q[k][i] * q[k][j];
            }
        }
    }
    a
}

fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

struct SmoothNet {
    graph: Graph,
    loss: NodeId,
    x: Tensor,
}

/// dense-tanh-dense with a softmax cross-entropy head, 3·8 + 8 + 8·3 + 3 = 59 parameters.
fn smooth_net(r: &mut SeedRng) -> SmoothNet {
    let (batch, inw, hid, k) = (16, 3, 8, 3);
    let mut g = Graph::new(inw);
    let x = g.input();
    let w1 = g.param("w1", rand_tensor(r, &[inw, hid], 1.0));
    let b1 = g.param("b1", rand_tensor(r, &[hid], 0.3));
    let h = g.dense(x, w1, Some(b1)).unwrap();
    let h = g.add_node(Op::Tanh(h)).unwrap();
    let w2 = g.param("w2", rand_tensor(r, &[hid, k], 1.0));
    let b2 = g.param("b2", rand_tensor(r, &[k], 0.3));
    let z = g.dense(h, w2, Some(b2)).unwrap();
    let ls = g.add_node(Op::LogSoftmax(z)).unwrap();
    let mut y = vec![0.0; batch * k];
    for row in 0..batch {
        y[row * k + r.below(k)] = 1.0;
    }
    let y = g.param("y", Tensor::matrix(batch, k, y).unwrap());
    let p = g.add_node(Op::Mul(ls, y)).unwrap();
    let s = g.add_node(Op::Sum(p)).unwrap();
    let loss = g.add_node(Op::Scale(s, -1.0 / batch as f64)).unwrap();
    let xs = rand_tensor(r, &[batch, inw], 2.0);
    SmoothNet {
        graph: g,
        loss,
        x: xs,
    }
}

/// Hutchinson and Lanczos on known spectra, and Hutchinson on a small net.
pub fn hessian_tooling(seed: u64) -> Check {
    timed("hessian tooling", || {
        let mut r = SeedRng::new(seed);
        let mut notes = Vec::new();
        for (case, n) in [10usize, 40, 100].into_iter().enumerate() {
            // Distinct magnitudes, every third eigenvalue negative.
            let eig: Vec<f64> = (0..n)
                .map(|i| {
                    let m = 0.5 + i as f64 + 0.3 * r.uniform();
                    if i % 3 == 2 {
                        -m
                    } else {
                        m
                    }
                })
                .collect();
            let a = quadratic(&mut r, &eig);
            let theta: Vec<f64> = (0..n).map(|_| r.normal()).collect();
            let eps = hvp_epsilon(&theta);
            let mut grad = |t: &[f64]| -> zsq_core::Result<Vec<f64>> { Ok(matvec(&a, t)) };
            let exact: f64 = eig.iter().sum();
            let tr = hutchinson_trace(
                |v| hvp(&mut grad, &theta, v, eps),
                n,
                1000,
                seed + case as u64,
            )
            .map_err(|e| e.to_string())?;
            if (tr.mean - exact).abs() > 3.0 * tr.stderr {
                return Err(format!(
                    "dim {n}: trace {} vs {exact} (stderr {})",
                    tr.mean, tr.stderr
                ));
            }
            let sp = lanczos_spectrum(
                |v| hvp(&mut grad, &theta, v, eps),
                n,
                n,
                seed + 10 + case as u64,
            )
            .map_err(|e| e.to_string())?;
            let mut want = eig.clone();
            want.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sp.ritz.len() != n {
                return Err(format!("dim {n}: {} Ritz values", sp.ritz.len()));
            }
            let worst = sp
                .ritz
                .iter()
                .zip(&want)
                .map(|(g, w)| (g - w).abs() / w.abs())
                .fold(0.0f64, f64::max);
            if worst > 1e-6 {
                return Err(format!("dim {n}: Ritz relative error {worst:.2e}"));
            }
            notes.push(format!(
                "dim {n}: trace z={:.2}, ritz err {worst:.1e}",
                (tr.mean - exact) / tr.stderr
            ));
        }

        let net = smooth_net(&mut r);
        let theta = net.graph.flat_params();
        let mut g = net.graph.clone();
        let mut grad = |t: &[f64]| -> zsq_core::Result<Vec<f64>> {
            g.set_flat_params(t)?;
            let acts = g.eval(&net.x)?;
            Ok(Graph::flatten_grads(&g.backward(&acts, net.loss)?))
        };
        let eps = hvp_epsilon(&theta);
        let h = explicit_hessian(&mut grad, &theta, eps).map_err(|e| e.to_string())?;
        let n = theta.len();
        let exact: f64 = (0..n).map(|i| h[i * n + i]).sum();
        let tr = hutchinson_trace(|v| hvp(&mut grad, &theta, v, eps), n, 4000, seed + 99)
            .map_err(|e| e.to_string())?;
        let rel = (tr.mean - exact).abs() / exact.abs();
        if rel > 0.05 {
            return Err(format!("net trace {} vs explicit {exact}", tr.mean));
        }
        notes.push(format!(
            "net ({n} params): trace within {:.2}%",
            100.0 * rel
        ));
        Ok(notes.join("; "))
    })
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        gradient_check(50, seed),
        quantizer_suite(100_000, seed),
        kappa_oracle(200, seed),
        hessian_tooling(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_codes_match_core() {
        let mut r = SeedRng::new(4);
        let w: Vec<f64> = (0..40).map(|_| r.normal()).collect();
        let st = QuantizedLayerState::from_weights(0, &Tensor::vector(&w), QuantConfig::weights(3))
            .unwrap();
        let mine = replay_codes(&w, st.params.min, st.params.max, 3);
        assert_eq!(mine, st.codes.iter().map(|&c| c as i64).collect::<Vec<_>>());
    }

    #[test]
    fn small_suites_pass() {
        for c in [
            gradient_check(5, 1),
            quantizer_suite(2000, 1),
            kappa_oracle(20, 1),
        ] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
