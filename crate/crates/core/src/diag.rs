//! Loss-surface diagnostics: gradient cosines, finite-difference Hessian-vector
//! products, Hutchinson trace, Lanczos spectrum, 1-D loss slices and per-layer
//! threshold-crossing histograms.
//!
//! Every estimator takes closures over a flat parameter vector so the same code
//! serves toy quadratics and full networks.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::gi::LayerUpdateReport;
use crate::graph::{Gradients, Graph};
use crate::linalg::tridiagonal_eigen;
use crate::rng::SeedRng;
use crate::tensor::{dot, norm};

/// One parameter's slice of a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    pub param: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl FlatGradient {
    pub fn new(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let mut off = 0;
        for e in &layout {
            if e.offset != off {
                return Err(shape_err!("layout gap at parameter {}", e.param));
            }
            off += e.len;
        }
        if off != values.len() {
            return Err(shape_err!(
                "layout covers {} of {} values",
                off,
                values.len()
            ));
        }
        Ok(Self { values, layout })
    }

    /// A vector with a single-entry layout.
    pub fn plain(values: Vec<f64>) -> Self {
        let layout = vec![LayoutEntry {
            param: 0,
            offset: 0,
            len: values.len(),
        }];
        Self { values, layout }
    }

    pub fn from_graph(graph: &Graph, grads: &Gradients) -> Self {
        let layout = graph
            .layout()
            .into_iter()
            .enumerate()
            .map(|(param, (offset, len))| LayoutEntry { param, offset, len })
            .collect();
        Self {
            values: Graph::flatten_grads(grads),
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Cosine of the angle between `a` and `b`; `None` when either has zero norm.
pub fn grad_cosine(a: &FlatGradient, b: &FlatGradient) -> Result<Option<f64>> {
    if a.layout != b.layout {
        return Err(shape_err!("gradient layouts differ"));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some(
        (dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0),
    ))
}

/// Element-wise mean, summed in step order.
pub fn epoch_mean_grad(steps: &[FlatGradient]) -> Result<FlatGradient> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Empty("epoch has no steps".into()))?;
    let mut acc = vec![0.0; first.len()];
    for s in steps {
        if s.layout != first.layout {
            return Err(shape_err!("gradient layouts differ within an epoch"));
        }
        for (a, v) in acc.iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    let n = steps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FlatGradient::new(acc, first.layout.clone())
}

/// Cosine between consecutive epoch means; no datum for the first epoch.
pub fn inter_epoch_cosine(
    current: &FlatGradient,
    previous: Option<&FlatGradient>,
) -> Result<Option<f64>> {
    match previous {
        Some(p) => grad_cosine(current, p),
        None => Ok(None),
    }
}

/// Default finite-difference step for curvature probes at `theta`.
pub fn hvp_epsilon(theta: &[f64]) -> f64 {
    1e-4 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Central-difference Hessian-vector product of the gradient oracle `grad`.
/// The probe is normalised before displacement and the result rescaled by `‖v‖`.
pub fn hvp<G>(grad: &mut G, theta: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if theta.len() != v.len() {
        return Err(shape_err!(
            "θ has {} entries, v has {}",
            theta.len(),
            v.len()
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid("hvp step must be positive".into()));
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Err(Error::Invalid("hvp direction has zero norm".into()));
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t + eps * x / nv).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t - eps * x / nv).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(shape_err!("gradient oracle returned the wrong length"));
    }
    let out: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * eps) * nv)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Hessian-vector product".into()));
    }
    Ok(out)
}

/// Dense symmetrised Hessian from `dim` finite-difference gradient columns.
pub fn explicit_hessian<G>(grad: &mut G, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = theta.len();
    let mut h = vec![0.0; n * n];
    let mut x = theta.to_vec();
    for j in 0..n {
        x[j] = theta[j] + eps;
        let gp = grad(&x)?;
        x[j] = theta[j] - eps;
        let gm = grad(&x)?;
        x[j] = theta[j];
        for i in 0..n {
            h[i * n + j] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = s;
            h[j * n + i] = s;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Standard error of the probe mean.
    pub stderr: f64,
    pub probes: usize,
    /// Probes still rejected after the resampling budget.
    pub flagged: usize,
}

/// Hutchinson estimate `E[vᵀHv]` with Rademacher probes.
pub fn hutchinson_trace<H>(hv: H, dim: usize, probes: usize, seed: u64) -> Result<TraceEstimate>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    hutchinson_trace_screened(hv, |_| true, dim, probes, seed, 0)
}

/// Hutchinson with a probe screen: a probe rejected by `accept` is redrawn up to
/// `resample` times, after which the last draw is used and counted as flagged.
pub fn hutchinson_trace_screened<H, A>(
    mut hv: H,
    mut accept: A,
    dim: usize,
    probes: usize,
    seed: u64,
    resample: usize,
) -> Result<TraceEstimate>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
    A: FnMut(&[f64]) -> bool,
{
    if probes == 0 || dim == 0 {
        return Err(Error::Invalid(
            "Hutchinson needs at least one probe and one dimension".into(),
        ));
    }
    let mut rng = SeedRng::new(seed);
    let mut samples = Vec::with_capacity(probes);
    let mut flagged = 0;
    for _ in 0..probes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.rademacher()).collect();
        let mut tries = 0;
        while !accept(&v) {
            if tries == resample {
                flagged += 1;
                break;
            }
            tries += 1;
            v = (0..dim).map(|_| rng.rademacher()).collect();
        }
        let hvv = hv(&v)?;
        if hvv.len() != dim {
            return Err(shape_err!("HVP returned {} entries for {}", hvv.len(), dim));
        }
        let s = dot(&v, &hvv);
        if !s.is_finite() {
            return Err(Error::NonFinite("Hutchinson sample".into()));
        }
        samples.push(s);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let stderr = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        libm::sqrt(var / n)
    } else {
        0.0
    };
    Ok(TraceEstimate {
        mean,
        stderr,
        probes,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    /// Ritz values, descending.
    pub ritz: Vec<f64>,
    /// Unit Ritz vector of the largest Ritz value.
    pub top_vector: Vec<f64>,
    /// Lanczos steps actually taken.
    pub steps: usize,
    /// Set when the Krylov space was exhausted before `m` steps.
    pub breakdown: bool,
    pub trace: Option<TraceEstimate>,
}

pub const LANCZOS_BREAKDOWN: f64 = 1e-12;

/// `m`-step Lanczos with full reorthogonalisation from a seeded Gaussian start.
pub fn lanczos_spectrum<H>(mut hv: H, dim: usize, m: usize, seed: u64) -> Result<SpectrumEstimate>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if m == 0 || m > dim {
        return Err(Error::Invalid("Lanczos steps must lie in 1..=dim".into()));
    }
    let mut rng = SeedRng::new(seed);
    let mut q: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n0 = norm(&q);
    q.iter_mut().for_each(|x| *x /= n0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut alpha = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    let mut breakdown = false;
    for j in 0..m {
        let mut w = hv(&q)?;
        if w.len() != dim {
            return Err(shape_err!("HVP returned {} entries for {}", w.len(), dim));
        }
        let a = dot(&w, &q);
        alpha.push(a);
        for (wi, qi) in w.iter_mut().zip(&q) {
            *wi -= a * qi;
        }
        if let (Some(prev), Some(&b)) = (basis.last(), beta.last()) {
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= b * pi;
            }
        }
        basis.push(q);
        for _ in 0..2 {
            for v in &basis {
                let c = dot(&w, v);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        if j + 1 == m {
            break;
        }
        let b = norm(&w);
        if !b.is_finite() {
            return Err(Error::NonFinite("Lanczos residual".into()));
        }
        if b < LANCZOS_BREAKDOWN {
            breakdown = true;
            break;
        }
        beta.push(b);
        q = w.iter().map(|x| x / b).collect();
    }
    let k = alpha.len();
    let eig = tridiagonal_eigen(&alpha, &beta[..k - 1])?;
    let y = eig.vector(k - 1);
    let mut top = vec![0.0; dim];
    for (yi, v) in y.iter().zip(&basis) {
        for (t, vi) in top.iter_mut().zip(v) {
            *t += yi * vi;
        }
    }
    let nt = norm(&top);
    top.iter_mut().for_each(|x| *x /= nt);
    let mut ritz = eig.values;
    ritz.reverse();
    Ok(SpectrumEstimate {
        ritz,
        top_vector: top,
        steps: k,
        breakdown,
        trace: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePoint {
    pub k: f64,
    /// `None` when the loss was non-finite at this point.
    pub loss: Option<f64>,
}

/// `L(θ + k·ĝ·e)` over `ks`. `theta` is never modified.
pub fn loss_slice<L>(
    mut loss: L,
    theta: &[f64],
    e: &[f64],
    g_hat: f64,
    ks: &[f64],
) -> Result<Vec<SlicePoint>>
where
    L: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != e.len() {
        return Err(shape_err!(
            "θ has {} entries, e has {}",
            theta.len(),
            e.len()
        ));
    }
    if (norm(e) - 1.0).abs() > 1e-8 {
        return Err(Error::Invalid("slice direction must be unit-norm".into()));
    }
    if ks.iter().any(|k| !(-0.5..=0.5).contains(k)) {
        return Err(Error::Invalid(
            "slice offsets must lie in [-0.5, 0.5]".into(),
        ));
    }
    let mut out = Vec::with_capacity(ks.len());
    let mut x = vec![0.0; theta.len()];
    for &k in ks {
        let step = k * g_hat;
        for ((xi, t), ei) in x.iter_mut().zip(theta).zip(e) {
            *xi = if step == 0.0 { *t } else { t + step * ei };
        }
        let l = match loss(&x) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) | Err(Error::NonFinite(_)) => None,
            Err(err) => return Err(err),
        };
        out.push(SlicePoint { k, loss: l });
    }
    Ok(out)
}

/// `n` evenly spaced offsets covering [-0.5, 0.5], exactly symmetric about 0.
pub fn slice_grid(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    let d = 2.0 * (n - 1) as f64;
    (0..n)
        .map(|i| (2.0 * i as f64 - (n - 1) as f64) / d)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingHistogram {
    /// Mean codes flipped per step, per layer.
    pub per_layer_mean: Vec<f64>,
    pub steps: usize,
    /// Share of all crossings carried by the three busiest layers; 0 when nothing moved.
    pub top3_share: f64,
}

pub fn crossing_histogram(
    reports: &[LayerUpdateReport],
    layers: usize,
) -> Result<CrossingHistogram> {
    if reports.is_empty() {
        return Err(Error::Empty("no layer reports".into()));
    }
    let mut sum = vec![0.0; layers];
    let mut count = vec![0usize; layers];
    for r in reports {
        if r.layer >= layers {
            return Err(Error::Invalid("report for an unknown layer".to_string()));
        }
        sum[r.layer] += r.crossings as f64;
        count[r.layer] += 1;
    }
    let per_layer_mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let total: f64 = per_layer_mean.iter().sum();
    let mut sorted = per_layer_mean.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top3_share = if total > 0.0 {
        sorted.iter().take(3).sum::<f64>() / total
    } else {
        0.0
    };
    Ok(CrossingHistogram {
        steps: count.iter().copied().max().unwrap_or(0),
        per_layer_mean,
        top3_share,
    })
}

/// Gini coefficient of nonnegative values; 0 for all-equal or all-zero input.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let weighted: f64 = s
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i + 1) as f64 - n as f64 - 1.0) * v)
        .sum();
    weighted / (n as f64 * total)
}
