//! Distillation losses on logits. Each returns the value together with its
//! gradient with respect to the (student) logits, ready to seed a backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::{softmax_rows, BatchNormState};
use crate::tensor::Tensor;

/// Mixing weights for the generator and student objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Generator mix: `(1-α) CE + α BNS`.
    pub alpha: f64,
    /// Student mix: `(1-δ) CE + δ KL`.
    pub delta: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            delta: 0.5,
            label_smoothing: 0.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.delta) {
            return Err(Error::Invalid("alpha and delta must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Invalid("label smoothing must lie in [0, 1)".into()));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Invalid("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
}

pub enum Targets<'a> {
    Hard(&'a [usize]),
    /// Row-stochastic label distribution `[B, K]`.
    Soft(&'a Tensor),
}

/// Mean over the batch of `-Σ y_k log softmax(z)_k`.
pub fn cross_entropy(logits: &Tensor, targets: Targets<'_>) -> Result<LossOutput> {
    let (b, k) = logits.dims2()?;
    let soft;
    let y = match targets {
        Targets::Hard(labels) => {
            if labels.len() != b {
                return Err(shape_err!("{} logit rows vs {} labels", b, labels.len()));
            }
            soft = one_hot(labels, k)?;
            &soft
        }
        Targets::Soft(t) => {
            if t.shape() != logits.shape() {
                return Err(shape_err!(
                    "{:?} logits vs {:?} targets",
                    logits.shape(),
                    t.shape()
                ));
            }
            t
        }
    };
    let logp = softmax_rows(logits, true);
    let mut value = 0.0;
    let mut grad = vec![0.0; b * k];
    let inv_b = 1.0 / b as f64;
    for r in 0..b {
        let mass: f64 = y.row(r).iter().sum();
        for j in 0..k {
            let i = r * k + j;
            if y.data()[i] != 0.0 {
                value -= y.data()[i] * logp.data()[i];
            }
            grad[i] = (mass * libm::exp(logp.data()[i]) - y.data()[i]) * inv_b;
        }
    }
    Ok(LossOutput {
        value: value * inv_b,
        grad: Tensor::matrix(b, k, grad)?,
    })
}

/// `T² · mean_b KL(softmax(teacher/T) ‖ softmax(student/T))`; the gradient is with
/// respect to the student logits only.
pub fn kl_divergence(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<LossOutput> {
    if student.shape() != teacher.shape() {
        return Err(shape_err!("{:?} vs {:?}", student.shape(), teacher.shape()));
    }
    if temperature <= 0.0 {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    let (b, k) = student.dims2()?;
    let t = temperature;
    let logq = softmax_rows(&student.map(|v| v / t), true);
    let logp = softmax_rows(&teacher.map(|v| v / t), true);
    let mut value = 0.0;
    let mut grad = vec![0.0; b * k];
    let inv_b = 1.0 / b as f64;
    for i in 0..b * k {
        let p = libm::exp(logp.data()[i]);
        if p > 0.0 {
            value += p * (logp.data()[i] - logq.data()[i]);
        }
        grad[i] = t * (libm::exp(logq.data()[i]) - p) * inv_b;
    }
    Ok(LossOutput {
        value: value.max(0.0) * t * t * inv_b,
        grad: Tensor::matrix(b, k, grad)?,
    })
}

/// Batch mean/variance of one batch-norm layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of(x: &Tensor) -> Result<Self> {
        let (b, f) = x.dims2()?;
        let nb = b as f64;
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..b {
            for c in 0..f {
                mean[c] += x.get2(r, c);
            }
        }
        mean.iter_mut().for_each(|m| *m /= nb);
        for r in 0..b {
            for c in 0..f {
                let d = x.get2(r, c) - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nb);
        Ok(Self { mean, var })
    }
}

/// `Σ_layers (‖μ_b − μ_run‖² + ‖σ²_b − σ²_run‖²) / F_layer`.
pub fn bns_loss(batch: &[BatchStats], teacher: &[BatchNormState]) -> Result<f64> {
    if batch.len() != teacher.len() {
        return Err(shape_err!(
            "{} batch-stat layers vs {} batch-norm layers",
            batch.len(),
            teacher.len()
        ));
    }
    let mut total = 0.0;
    for (s, t) in batch.iter().zip(teacher) {
        let f = t.features();
        if s.mean.len() != f || s.var.len() != f {
            return Err(shape_err!(
                "layer with {} features got stats of {}",
                f,
                s.mean.len()
            ));
        }
        let mut acc = 0.0;
        for c in 0..f {
            let dm = s.mean[c] - t.running_mean[c];
            let dv = s.var[c] - t.running_var[c];
            acc += dm * dm + dv * dv;
        }
        total += acc / f as f64;
    }
    Ok(total)
}

/// Gradient of [`bns_loss`] with respect to each layer's input `x[B,F]`.
pub fn bns_input_grads(
    inputs: &[&Tensor],
    teacher: &[BatchNormState],
) -> Result<(f64, Vec<Tensor>)> {
    let stats: Vec<BatchStats> = inputs
        .iter()
        .map(|x| BatchStats::of(x))
        .collect::<Result<_>>()?;
    let value = bns_loss(&stats, teacher)?;
    let mut grads = Vec::with_capacity(inputs.len());
    for ((x, s), t) in inputs.iter().zip(&stats).zip(teacher) {
        let (b, f) = x.dims2()?;
        let nb = b as f64;
        let ff = f as f64;
        let mut g = vec![0.0; b * f];
        for c in 0..f {
            let dm = 2.0 * (s.mean[c] - t.running_mean[c]) / ff;
            let dv = 2.0 * (s.var[c] - t.running_var[c]) / ff;
            for r in 0..b {
                // d var / d x = 2 (x - mean) / B; the mean term of that derivative sums to zero
                g[r * f + c] = dm / nb + dv * 2.0 * (x.get2(r, c) - s.mean[c]) / nb;
            }
        }
        grads.push(Tensor::matrix(b, f, g)?);
    }
    Ok((value, grads))
}

#[derive(Debug, Clone)]
pub struct StudentLoss {
    pub value: f64,
    pub ce: f64,
    pub kl: f64,
    pub grad: Tensor,
    pub grad_ce: Tensor,
    pub grad_kl: Tensor,
}

/// `(1-δ) CE(student, labels) + δ KL(teacher ‖ student)`.
pub fn student_loss(
    student: &Tensor,
    teacher: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<StudentLoss> {
    weights.validate()?;
    let (_, k) = student.dims2()?;
    let ce = if weights.label_smoothing > 0.0 {
        let y = smooth_labels(labels, weights.label_smoothing, k)?;
        cross_entropy(student, Targets::Soft(&y))?
    } else {
        cross_entropy(student, Targets::Hard(labels))?
    };
    let kl = kl_divergence(student, teacher, weights.temperature)?;
    let d = weights.delta;
    let grad = ce.grad.zip_map(&kl.grad, |a, b| (1.0 - d) * a + d * b)?;
    Ok(StudentLoss {
        value: (1.0 - d) * ce.value + d * kl.value,
        ce: ce.value,
        kl: kl.value,
        grad,
        grad_ce: ce.grad,
        grad_kl: kl.grad,
    })
}

/// `y' = (1-c) onehot + c/K`.
pub fn smooth_labels(labels: &[usize], c: f64, classes: usize) -> Result<Tensor> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::Invalid("label smoothing must lie in [0, 1)".into()));
    }
    let mut t = one_hot(labels, classes)?;
    let base = c / classes as f64;
    for v in t.data_mut() {
        *v = (1.0 - c) * *v + base;
    }
    Ok(t)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Empty("label batch".into()));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(alloc::format!(
                "label {l} outside [0, {classes})"
            )));
        }
        data[r * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap();
    (0..logits.len() / k)
        .map(|r| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}
