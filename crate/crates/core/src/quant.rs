//! Symmetric uniform fake quantization.
//!
//! A tensor with range `[min, max]` maps onto `n`-bit integers through
//! `q = round(x * S - z)` with `S = (2^n - 1) / (max - min)` and
//! `z = S * min + 2^(n-1)`, so `min -> -2^(n-1)` and `max -> 2^(n-1) - 1`.
//! Dequantization is `(q + z) / S`. Rounding is half-to-even and codes are
//! clamped to the signed `n`-bit range.

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Half-width used to widen a constant tensor's range.
pub const DEGENERATE_WIDEN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeSource {
    /// Range recomputed from the tensor on every forward.
    MinMax,
    /// Range taken from an [`ActivationObserver`].
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: u32,
    pub range_source: RangeSource,
}

impl QuantConfig {
    pub fn weights(bits: u32) -> Self {
        Self {
            bits,
            range_source: RangeSource::MinMax,
        }
    }

    pub fn activations(bits: u32) -> Self {
        Self {
            bits,
            range_source: RangeSource::Observed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=30).contains(&self.bits) {
            return Err(Error::Invalid(alloc::format!(
                "bit-width {} outside [2, 30]",
                self.bits
            )));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

pub fn qmin(bits: u32) -> i32 {
    -(1i32 << (bits - 1))
}

pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Scale, zero offset and the range they were fitted to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub zero: f64,
    pub min: f64,
    pub max: f64,
    pub bits: u32,
}

impl AffineParams {
    /// Width of one quantization bin in real units.
    pub fn step(&self) -> f64 {
        1.0 / self.scale
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

pub fn quant_params(min: f64, max: f64, bits: u32) -> Result<AffineParams> {
    QuantConfig::weights(bits).validate()?;
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite("quantization range".into()));
    }
    if min >= max {
        return Err(Error::DegenerateRange { min, max });
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let scale = levels / (max - min);
    let zero = scale * min + (1u64 << (bits - 1)) as f64;
    Ok(AffineParams {
        scale,
        zero,
        min,
        max,
        bits,
    })
}

/// [`quant_params`] with a constant range widened symmetrically by [`DEGENERATE_WIDEN`].
pub fn quant_params_widened(min: f64, max: f64, bits: u32) -> Result<AffineParams> {
    match quant_params(min, max, bits) {
        Err(Error::DegenerateRange { min, max }) if min == max => {
            quant_params(min - DEGENERATE_WIDEN, max + DEGENERATE_WIDEN, bits)
        }
        other => other,
    }
}

#[inline]
pub fn quantize_scalar(x: f64, p: &AffineParams) -> i32 {
    let v = libm::rint(x * p.scale - p.zero);
    let lo = qmin(p.bits) as f64;
    let hi = qmax(p.bits) as f64;
    v.clamp(lo, hi) as i32
}

#[inline]
pub fn dequantize_scalar(q: i32, p: &AffineParams) -> f64 {
    (q as f64 + p.zero) / p.scale
}

pub fn quantize(values: &[f64], p: &AffineParams) -> Result<Vec<i32>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize input".into()));
    }
    Ok(values.iter().map(|&x| quantize_scalar(x, p)).collect())
}

pub fn dequantize(codes: &[i32], p: &AffineParams) -> Vec<f64> {
    codes.iter().map(|&q| dequantize_scalar(q, p)).collect()
}

/// Per-layer record of the last weight quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayerState {
    pub layer: usize,
    pub weights: Tensor,
    pub codes: Vec<i32>,
    pub config: QuantConfig,
    pub params: AffineParams,
}

impl QuantizedLayerState {
    /// Quantizes `weights` under a range fitted to their own min/max.
    pub fn from_weights(layer: usize, weights: &Tensor, config: QuantConfig) -> Result<Self> {
        let (lo, hi) = weights.min_max();
        let params = quant_params_widened(lo, hi, config.bits)?;
        let codes = quantize(weights.data(), &params)?;
        Ok(Self {
            layer,
            weights: weights.clone(),
            codes,
            config,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.codes.len()
    }
}

/// Quantize-then-dequantize. Weights use their own min/max; activations need
/// an observed range passed through `observed`.
pub fn fake_quant_forward(
    x: &Tensor,
    config: QuantConfig,
    observed: Option<(f64, f64)>,
) -> Result<(Tensor, QuantizedLayerState)> {
    config.validate()?;
    let (lo, hi) = match (config.range_source, observed) {
        (RangeSource::Observed, Some(r)) => r,
        (RangeSource::Observed, None) => {
            return Err(Error::Invalid("activation range not observed".into()))
        }
        (RangeSource::MinMax, _) => x.min_max(),
    };
    let params = quant_params_widened(lo, hi, config.bits)?;
    let codes = quantize(x.data(), &params)?;
    let out = Tensor::new(x.shape().to_vec(), dequantize(&codes, &params))?;
    Ok((
        out,
        QuantizedLayerState {
            layer: 0,
            weights: x.clone(),
            codes,
            config,
            params,
        },
    ))
}

/// Clipped straight-through gradient: pass inside `[min, max]`, zero outside.
pub fn ste_backward(upstream: &Tensor, x: &Tensor, p: &AffineParams) -> Result<Tensor> {
    upstream.zip_map(x, |g, v| if p.contains(v) { g } else { 0.0 })
}

/// Moving-average min/max tracker for activation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationObserver {
    pub running_min: f64,
    pub running_max: f64,
    pub momentum: f64,
    pub observed_batches: u64,
}

impl ActivationObserver {
    pub fn new(momentum: f64) -> Self {
        Self {
            running_min: 0.0,
            running_max: 0.0,
            momentum,
            observed_batches: 0,
        }
    }

    pub fn observe(&mut self, batch: &[f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("activation batch".into()));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation batch".into()));
        }
        let (lo, hi) = batch
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if self.observed_batches == 0 {
            self.running_min = lo;
            self.running_max = hi;
        } else {
            let m = self.momentum;
            self.running_min = (1.0 - m) * self.running_min + m * lo;
            self.running_max = (1.0 - m) * self.running_max + m * hi;
        }
        self.observed_batches += 1;
        Ok(())
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        (self.observed_batches > 0).then_some((self.running_min, self.running_max))
    }
}

/// Number of positions whose integer code differs.
pub fn count_threshold_crossings(before: &[i32], after: &[i32]) -> Result<usize> {
    if before.len() != after.len() {
        return Err(shape_err!(
            "crossing count over {} vs {} codes",
            before.len(),
            after.len()
        ));
    }
    Ok(before.iter().zip(after).filter(|(a, b)| a != b).count())
}
