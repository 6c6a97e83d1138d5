//! Gradient variance estimate and the smoothed statistics that drive batch-size policies.
//!
//! Given the mean gradient `g` and the per-coordinate mean of squared per-example
//! gradients `q` of one mini-batch, the sample variance is `S = q - g.^2`. Its 1-norm is
//! the running estimate of `tr(Sigma)`.
//!
//! `S` is the plain (biased) second-moment estimator: for a batch drawn with
//! replacement, `E[S_j] = (m - 1) / m * sigma_j^2`. [`sample_variance_corrected`]
//! rescales by `m / (m - 1)` for callers that want the unbiased version.

use crate::error::{Error, Result};

/// Default EMA constant for `xi` and `F_avg`.
pub const DEFAULT_EMA_DECAY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    /// Per-coordinate variance, clamped at zero.
    pub per_coord: Vec<f64>,
    /// `sum_j per_coord[j]`, the estimate of `tr(Sigma)`.
    pub trace: f64,
}

/// `S_j = max(q_j - g_j^2, 0)`.
///
/// `g` must be the mean gradient of the *unregularized* per-example losses whose
/// squares were averaged into `q`.
pub fn sample_variance(second_moment: &[f64], mean_grad: &[f64]) -> Result<VarianceEstimate> {
    if second_moment.len() != mean_grad.len() {
        return Err(Error::contract(format!(
            "sample_variance: second moment has length {}, gradient has length {}",
            second_moment.len(),
            mean_grad.len()
        )));
    }
    // q_j >= g_j^2 by Jensen, but the difference can round to a tiny negative.
    let per_coord: Vec<f64> = second_moment
        .iter()
        .zip(mean_grad)
        .map(|(q, g)| (q - g * g).max(0.0))
        .collect();
    let trace = per_coord.iter().sum();
    Ok(VarianceEstimate { per_coord, trace })
}

/// [`sample_variance`] with Bessel's correction `m / (m - 1)`.
pub fn sample_variance_corrected(
    second_moment: &[f64],
    mean_grad: &[f64],
    batch_size: usize,
) -> Result<VarianceEstimate> {
    if batch_size < 2 {
        return Err(Error::contract(format!(
            "Bessel correction needs batch size >= 2, got {batch_size}"
        )));
    }
    let mut est = sample_variance(second_moment, mean_grad)?;
    let factor = batch_size as f64 / (batch_size as f64 - 1.0);
    est.per_coord.iter_mut().for_each(|s| *s *= factor);
    est.trace *= factor;
    Ok(est)
}

/// Bias-corrected estimate `||g||^2 - trace / m` of `||grad F||^2`.
///
/// Diagnostic only: it is not used by any policy and can go negative.
pub fn debiased_grad_norm_sq(grad_norm_sq: f64, trace: f64, batch_size: usize) -> f64 {
    grad_norm_sq - trace / batch_size as f64
}

#[inline]
pub fn ema(decay: f64, old: f64, new: f64) -> f64 {
    decay * old + (1.0 - decay) * new
}

/// Exponential moving averages carried across training steps.
///
/// All accumulators start at zero and are never bias-corrected, so the smoothed
/// variance (and with it the adaptive batch size) ramps up from zero over the first
/// few dozen steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedStats {
    /// Smoothed `||S||_1`.
    pub xi: f64,
    /// Smoothed (unregularized) loss.
    pub f_avg: f64,
    /// Smoothed `||g||^2`, consumed by the noisy-gradient-norm rule.
    pub grad_norm_sq: f64,
    pub decay: f64,
}

impl SmoothedStats {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::contract(format!(
                "EMA decay must lie in [0, 1), got {decay}"
            )));
        }
        Ok(Self {
            xi: 0.0,
            f_avg: 0.0,
            grad_norm_sq: 0.0,
            decay,
        })
    }

    pub fn update(&mut self, loss: f64, trace: f64, grad_norm_sq: f64) {
        self.xi = ema(self.decay, self.xi, trace);
        self.f_avg = ema(self.decay, self.f_avg, loss);
        self.grad_norm_sq = ema(self.decay, self.grad_norm_sq, grad_norm_sq);
    }
}

impl Default for SmoothedStats {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_DECAY).expect("default decay is valid")
    }
}
