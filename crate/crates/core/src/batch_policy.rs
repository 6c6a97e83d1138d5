//! Batch-size rules.
//!
//! Each rule maps the current (smoothed) statistics to a real-valued target batch
//! size. [`round_and_clip`] turns that target into the integer batch size used by the
//! next step.

use crate::error::{Error, Result};

/// Floor on the loss in the CABS denominators, in loss units.
pub const LOSS_FLOOR: f64 = 1e-8;
/// Floor on `||g||^2` in the noisy-gradient-norm denominator.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_MIN_BATCH: usize = 16;
pub const DEFAULT_MAX_BATCH: usize = 4096;

/// CABS: `alpha * xi / F_avg`.
pub fn cabs_batch_size(learning_rate: f64, xi: f64, f_avg: f64) -> f64 {
    learning_rate * xi / f_avg.max(LOSS_FLOOR)
}

/// CABS with a known lower bound `F*` on the objective: `alpha * xi / (F_avg - F*)`.
pub fn cabs_with_fstar_batch_size(learning_rate: f64, xi: f64, f_avg: f64, f_star: f64) -> f64 {
    learning_rate * xi / (f_avg - f_star).max(LOSS_FLOOR)
}

/// Descent-direction-in-expectation rule: `trace / (theta^2 * ||g||^2)`.
pub fn noisy_grad_norm_batch_size(theta: f64, trace: f64, grad_norm_sq: f64) -> f64 {
    trace / (theta * theta * grad_norm_sq.max(GRAD_NORM_FLOOR))
}

/// Maximizer of the expected gain per example under an `L`-Lipschitz gradient:
/// `2 L alpha / (2 - L alpha) * tr(Sigma) / ||grad F||^2`.
///
/// Needs the exact gradient norm, so it is only usable on oracle problems.
pub fn lipschitz_oracle_batch_size(
    lipschitz: f64,
    learning_rate: f64,
    trace: f64,
    true_grad_norm_sq: f64,
) -> Result<f64> {
    let la = lipschitz * learning_rate;
    if la >= 2.0 {
        return Err(Error::InfeasibleStep(la));
    }
    if true_grad_norm_sq <= 0.0 {
        return Err(Error::contract(format!(
            "Lipschitz oracle rule needs ||grad F||^2 > 0, got {true_grad_norm_sq}"
        )));
    }
    Ok(2.0 * la / (2.0 - la) * trace / true_grad_norm_sq)
}

/// Pre-scheduled growth `m0 * rho^step`.
pub fn geometric_batch_size(step: u64, initial: usize, growth: f64) -> f64 {
    initial as f64 * growth.powf(step as f64)
}

/// Round half away from zero, then clamp into `[min_batch, max_batch]`.
///
/// NaN maps to `min_batch`.
pub fn round_and_clip(target: f64, min_batch: usize, max_batch: usize) -> usize {
    debug_assert!(min_batch <= max_batch);
    if target.is_nan() {
        return min_batch;
    }
    let rounded = target.round();
    if rounded <= min_batch as f64 {
        min_batch
    } else if rounded >= max_batch as f64 {
        max_batch
    } else {
        rounded as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    Constant { batch_size: usize },
    Geometric { initial: usize, growth: f64 },
    NoisyGradNorm { theta: f64 },
    LipschitzOracle { lipschitz: f64 },
    Cabs,
    CabsWithFStar { f_star: f64 },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Constant { .. } => "constant",
            PolicyKind::Geometric { .. } => "geometric",
            PolicyKind::NoisyGradNorm { .. } => "noisy-grad-norm",
            PolicyKind::LipschitzOracle { .. } => "lipschitz-oracle",
            PolicyKind::Cabs => "cabs",
            PolicyKind::CabsWithFStar { .. } => "cabs-with-fstar",
        }
    }
}

/// Everything a policy may look at when choosing the next batch size.
#[derive(Debug, Clone, Copy, Default)]
pub struct PolicyInputs {
    /// Index of the step the batch size is chosen for (0 for the first step).
    pub next_step: u64,
    pub xi: f64,
    pub f_avg: f64,
    pub grad_norm_sq_avg: f64,
    /// Exact `(tr(Sigma), ||grad F||^2)` at the current iterate, on oracle problems.
    pub exact: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSizePolicy {
    pub kind: PolicyKind,
    pub min_batch: usize,
    pub max_batch: usize,
}

impl BatchSizePolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            min_batch: DEFAULT_MIN_BATCH,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }

    pub fn cabs() -> Self {
        Self::new(PolicyKind::Cabs)
    }

    pub fn constant(batch_size: usize) -> Self {
        let mut p = Self::new(PolicyKind::Constant { batch_size });
        p.min_batch = p.min_batch.min(batch_size);
        p.max_batch = p.max_batch.max(batch_size);
        p
    }

    pub fn with_bounds(mut self, min_batch: usize, max_batch: usize) -> Self {
        self.min_batch = min_batch;
        self.max_batch = max_batch;
        self
    }

    /// Checks parameter ranges; `learning_rate` matters for the Lipschitz oracle.
    pub fn validate(&self, learning_rate: f64) -> Result<()> {
        if self.min_batch < 2 {
            return Err(Error::config(format!(
                "min batch size must be >= 2 for the variance estimate, got {}",
                self.min_batch
            )));
        }
        if self.max_batch < self.min_batch {
            return Err(Error::config(format!(
                "max batch size {} is below min batch size {}",
                self.max_batch, self.min_batch
            )));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        match self.kind {
            PolicyKind::Constant { batch_size } => {
                if batch_size < self.min_batch || batch_size > self.max_batch {
                    return Err(Error::config(format!(
                        "constant batch size {batch_size} outside [{}, {}]",
                        self.min_batch, self.max_batch
                    )));
                }
            }
            PolicyKind::Geometric { initial, growth } => {
                if !(growth > 1.0 && growth.is_finite()) {
                    return Err(Error::config(format!(
                        "geometric growth factor must be > 1, got {growth}"
                    )));
                }
                if initial < self.min_batch {
                    return Err(Error::config(format!(
                        "geometric initial batch size {initial} is below min batch size {}",
                        self.min_batch
                    )));
                }
            }
            PolicyKind::NoisyGradNorm { theta } => {
                if !(theta > 0.0 && theta <= 1.0) {
                    return Err(Error::config(format!("theta must lie in (0, 1], got {theta}")));
                }
            }
            PolicyKind::LipschitzOracle { lipschitz } => {
                if !(lipschitz > 0.0 && lipschitz.is_finite()) {
                    return Err(Error::config(format!(
                        "Lipschitz constant must be > 0, got {lipschitz}"
                    )));
                }
                if lipschitz * learning_rate >= 2.0 {
                    return Err(Error::InfeasibleStep(lipschitz * learning_rate));
                }
            }
            PolicyKind::Cabs => {}
            PolicyKind::CabsWithFStar { f_star } => {
                if !(f_star >= 0.0 && f_star.is_finite()) {
                    return Err(Error::config(format!("F* must be finite and >= 0, got {f_star}")));
                }
            }
        }
        Ok(())
    }

    /// Batch size for the very first step.
    pub fn initial_batch_size(&self) -> usize {
        let m = match self.kind {
            PolicyKind::Constant { batch_size } => batch_size,
            PolicyKind::Geometric { initial, .. } => initial,
            _ => self.min_batch,
        };
        m.clamp(self.min_batch, self.max_batch)
    }

    /// Real-valued target before rounding and clipping.
    pub fn target(&self, learning_rate: f64, inputs: &PolicyInputs) -> Result<f64> {
        Ok(match self.kind {
            PolicyKind::Constant { batch_size } => batch_size as f64,
            PolicyKind::Geometric { initial, growth } => {
                geometric_batch_size(inputs.next_step, initial, growth)
            }
            PolicyKind::NoisyGradNorm { theta } => {
                noisy_grad_norm_batch_size(theta, inputs.xi, inputs.grad_norm_sq_avg)
            }
            PolicyKind::LipschitzOracle { lipschitz } => {
                let (trace, grad_norm_sq) = inputs.exact.ok_or_else(|| {
                    Error::contract("lipschitz-oracle policy needs an objective with exact statistics")
                })?;
                if grad_norm_sq <= 0.0 {
                    // At the optimum the rule is undefined; any batch size gives zero gain.
                    return Ok(f64::INFINITY);
                }
                lipschitz_oracle_batch_size(lipschitz, learning_rate, trace, grad_norm_sq)?
            }
            PolicyKind::Cabs => cabs_batch_size(learning_rate, inputs.xi, inputs.f_avg),
            PolicyKind::CabsWithFStar { f_star } => {
                cabs_with_fstar_batch_size(learning_rate, inputs.xi, inputs.f_avg, f_star)
            }
        })
    }

    pub fn next_batch_size(&self, learning_rate: f64, inputs: &PolicyInputs) -> Result<usize> {
        let target = self.target(learning_rate, inputs)?;
        Ok(round_and_clip(target, self.min_batch, self.max_batch))
    }

    /// Whether the policy reads the exact oracle statistics.
    pub fn needs_exact_stats(&self) -> bool {
        matches!(self.kind, PolicyKind::LipschitzOracle { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cabs_arithmetic() {
        assert!((cabs_batch_size(0.01, 3200.0, 2.0) - 16.0).abs() < 1e-12);
        assert_eq!(cabs_batch_size(0.01, 0.0, 2.0), 0.0);
        assert!((cabs_batch_size(0.1, 1000.0, 0.5) - 200.0).abs() < 1e-12);
        assert_eq!(round_and_clip(cabs_batch_size(0.01, 0.0, 2.0), 16, 4096), 16);
    }

    #[test]
    fn cabs_with_fstar_arithmetic() {
        assert_eq!(
            cabs_with_fstar_batch_size(0.3, 17.0, 1.25, 0.0),
            cabs_batch_size(0.3, 17.0, 1.25)
        );
        assert!((cabs_with_fstar_batch_size(0.1, 100.0, 2.0, 1.0) - 10.0).abs() < 1e-12);
        let at_floor = cabs_with_fstar_batch_size(0.1, 100.0, 1.0, 1.5);
        assert_eq!(at_floor, 0.1 * 100.0 / LOSS_FLOOR);
        assert_eq!(round_and_clip(at_floor, 16, 4096), 4096);
    }

    #[test]
    fn noisy_grad_norm_arithmetic() {
        assert_eq!(noisy_grad_norm_batch_size(1.0, 4.0, 1.0), 4.0);
        assert_eq!(noisy_grad_norm_batch_size(0.5, 4.0, 1.0), 16.0);
        assert_eq!(noisy_grad_norm_batch_size(0.5, 0.0, 1.0), 0.0);
    }

    #[test]
    fn lipschitz_oracle_arithmetic() {
        assert!((lipschitz_oracle_batch_size(1.0, 1.0, 6.0, 3.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((lipschitz_oracle_batch_size(2.0, 0.5, 7.5, 7.5).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            lipschitz_oracle_batch_size(1.0, 2.0, 1.0, 1.0),
            Err(Error::InfeasibleStep(_))
        ));
    }

    #[test]
    fn geometric_schedule() {
        assert_eq!(geometric_batch_size(0, 16, 1.1), 16.0);
        let m1 = geometric_batch_size(1, 16, 1.1);
        assert!((m1 - 17.6).abs() < 1e-12);
        assert_eq!(round_and_clip(m1, 16, 4096), 18);
        let p = BatchSizePolicy::new(PolicyKind::Geometric {
            initial: 16,
            growth: 1.0,
        });
        assert!(p.validate(0.1).is_err());
    }

    #[test]
    fn round_and_clip_rules() {
        assert_eq!(round_and_clip(16.4, 2, 4096), 16);
        assert_eq!(round_and_clip(16.5, 2, 4096), 17);
        assert_eq!(round_and_clip(3.0, 16, 4096), 16);
        assert_eq!(round_and_clip(1e9, 16, 4096), 4096);
        assert_eq!(round_and_clip(f64::INFINITY, 16, 4096), 4096);
        assert_eq!(round_and_clip(f64::NAN, 16, 4096), 16);
    }

    #[test]
    fn validation() {
        assert!(BatchSizePolicy::cabs().validate(0.1).is_ok());
        assert!(BatchSizePolicy::cabs().with_bounds(1, 10).validate(0.1).is_err());
        assert!(BatchSizePolicy::cabs().with_bounds(20, 10).validate(0.1).is_err());
        let oracle = BatchSizePolicy::new(PolicyKind::LipschitzOracle { lipschitz: 1.0 });
        assert!(oracle.validate(1.5).is_ok());
        assert!(matches!(oracle.validate(2.0), Err(Error::InfeasibleStep(_))));
        for theta in [0.0, 1.5] {
            assert!(BatchSizePolicy::new(PolicyKind::NoisyGradNorm { theta })
                .validate(0.1)
                .is_err());
        }
        assert!(BatchSizePolicy::new(PolicyKind::CabsWithFStar { f_star: -1.0 })
            .validate(0.1)
            .is_err());
    }

    #[test]
    fn initial_batch_sizes() {
        assert_eq!(BatchSizePolicy::cabs().initial_batch_size(), 16);
        assert_eq!(BatchSizePolicy::constant(32).initial_batch_size(), 32);
        let g = BatchSizePolicy::new(PolicyKind::Geometric {
            initial: 20,
            growth: 1.1,
        });
        assert_eq!(g.initial_batch_size(), 20);
    }

    #[test]
    fn oracle_policy_requires_exact_stats() {
        let p = BatchSizePolicy::new(PolicyKind::LipschitzOracle { lipschitz: 1.0 });
        assert!(p.target(0.5, &PolicyInputs::default()).is_err());
        let inputs = PolicyInputs {
            exact: Some((6.0, 3.0)),
            ..Default::default()
        };
        assert!((p.target(1.0, &inputs).unwrap() - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cabs_rescaling_invariance(
            alpha in 1e-3..1.0f64,
            xi in 1e-2..1e4f64,
            f in 1e-3..10.0f64,
            c in prop::sample::select(vec![0.1, 10.0, 0.5, 4.0]),
        ) {
            let base = cabs_batch_size(alpha, xi, f);
            let scaled = cabs_batch_size(alpha / c, c * c * xi, c * f);
            prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
        }

        #[test]
        fn cabs_is_linear_in_alpha(alpha in 1e-4..1.0f64, xi in 0.0..1e4f64, f in 1e-3..10.0f64) {
            // Doubling is exact in binary floating point.
            prop_assert_eq!(cabs_batch_size(2.0 * alpha, xi, f), 2.0 * cabs_batch_size(alpha, xi, f));
        }

        #[test]
        fn rules_are_monotone(
            a in 0.0..1e3f64, b in 0.0..1e3f64, d1 in 1e-6..10.0f64, d2 in 1e-6..10.0f64,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (dlo, dhi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(cabs_batch_size(0.1, lo, dlo) <= cabs_batch_size(0.1, hi, dlo));
            prop_assert!(cabs_batch_size(0.1, lo, dhi) <= cabs_batch_size(0.1, lo, dlo));
            prop_assert!(cabs_with_fstar_batch_size(0.1, lo, dlo + 1.0, 1.0) <= cabs_with_fstar_batch_size(0.1, hi, dlo + 1.0, 1.0));
            prop_assert!(noisy_grad_norm_batch_size(0.8, lo, dlo) <= noisy_grad_norm_batch_size(0.8, hi, dlo));
            prop_assert!(noisy_grad_norm_batch_size(0.8, lo, dhi) <= noisy_grad_norm_batch_size(0.8, lo, dlo));
            let l1 = lipschitz_oracle_batch_size(1.0, 0.5, lo, dlo).unwrap();
            prop_assert!(l1 <= lipschitz_oracle_batch_size(1.0, 0.5, hi, dlo).unwrap());
            prop_assert!(lipschitz_oracle_batch_size(1.0, 0.5, lo, dhi).unwrap() <= l1);
        }

        #[test]
        fn round_and_clip_range(x in -1e6..1e6f64, lo in 2usize..100, span in 0usize..5000) {
            let hi = lo + span;
            let m = round_and_clip(x, lo, hi);
            prop_assert!(m >= lo && m <= hi);
        }

        #[test]
        fn round_and_clip_fixes_in_range_integers(lo in 2usize..100, span in 0usize..5000, off in 0usize..5000) {
            let hi = lo + span;
            let k = lo + off.min(span);
            prop_assert_eq!(round_and_clip(k as f64, lo, hi), k);
        }
    }
}
