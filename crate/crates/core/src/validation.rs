//! Independent checks of the batch-size analysis.
//!
//! Everything here recomputes a quantity by a route that does not share code with the
//! implementation it checks: integer scans instead of the closed-form optimal batch
//! size, central finite differences instead of backprop, single-example gradients
//! instead of the fused second moment, Monte Carlo instead of the analytic bias of the
//! sample variance, and eigendecompositions for the convexity bounds.
//!
//! [`run_all`] bundles the suites behind the `validate` CLI verb.

use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::batch_policy::{cabs_with_fstar_batch_size, lipschitz_oracle_batch_size};
use crate::data::{generate_gaussian_blobs, Dataset};
use crate::error::{Error, Result};
use crate::grad_stats::sample_variance;
use crate::models::{Curvature, ModelSpec, QuadraticOracle};
use crate::{seeded_stream, Rng};

/// Relative step for central differences: `eps_j = FD_REL_STEP * (1 + |w_j|)`.
pub const FD_REL_STEP: f64 = 1e-6;

/// Inputs of the expected-gain bound for one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainModel {
    pub learning_rate: f64,
    pub lipschitz: f64,
    /// `||grad F||^2`
    pub grad_norm_sq: f64,
    /// `tr(Sigma)`
    pub trace: f64,
}

impl GainModel {
    pub fn new(learning_rate: f64, lipschitz: f64, grad_norm_sq: f64, trace: f64) -> Result<Self> {
        if lipschitz.is_nan() || lipschitz <= 0.0 || learning_rate < 0.0 || grad_norm_sq < 0.0 || trace < 0.0 {
            return Err(Error::contract(
                "gain model needs L > 0 and nonnegative alpha, ||grad F||^2, trace",
            ));
        }
        Ok(Self {
            learning_rate,
            lipschitz,
            grad_norm_sq,
            trace,
        })
    }

    pub fn is_feasible(&self) -> bool {
        self.lipschitz * self.learning_rate < 2.0
    }

    /// Largest learning rate with positive expected gain at batch size `m`.
    pub fn max_learning_rate(&self, m: usize) -> f64 {
        2.0 * self.grad_norm_sq / (self.lipschitz * (self.grad_norm_sq + self.trace / m as f64))
    }
}

/// Lower bound on the expected decrease of one step:
/// `(alpha - L alpha^2 / 2) ||grad F||^2 - L alpha^2 / (2 m) tr(Sigma)`.
pub fn expected_gain(gm: &GainModel, m: usize) -> f64 {
    let (a, l) = (gm.learning_rate, gm.lipschitz);
    (a - 0.5 * l * a * a) * gm.grad_norm_sq - l * a * a / (2.0 * m as f64) * gm.trace
}

/// Scan `range` for the integer maximizer of `expected_gain / m`; ties go to the smaller `m`.
pub fn brute_force_optimal_batch(gm: &GainModel, range: RangeInclusive<usize>) -> Result<usize> {
    if !gm.is_feasible() {
        return Err(Error::InfeasibleStep(gm.lipschitz * gm.learning_rate));
    }
    if *range.start() == 0 || range.is_empty() {
        return Err(Error::contract("batch size range must be nonempty and start at >= 1"));
    }
    let mut best = (*range.start(), f64::NEG_INFINITY);
    for m in range {
        let u = expected_gain(gm, m) / m as f64;
        if u > best.1 {
            best = (m, u);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    /// `||g - grad F|| < ||g||`
    pub condition: bool,
    pub inner_product: f64,
    /// `condition` implies `<g, grad F> > 0`.
    pub implication_holds: bool,
}

pub fn descent_direction_check(g: &[f64], grad: &[f64]) -> Result<DescentCheck> {
    if g.len() != grad.len() {
        return Err(Error::contract("vectors must have equal length"));
    }
    let g_norm = norm(g);
    if g_norm <= 0.0 {
        return Err(Error::contract("||g|| must be positive"));
    }
    let diff: Vec<f64> = g.iter().zip(grad).map(|(a, b)| a - b).collect();
    let condition = norm(&diff) < g_norm;
    let inner_product = dot(g, grad);
    Ok(DescentCheck {
        condition,
        inner_product,
        implication_holds: !condition || inner_product > 0.0,
    })
}

/// Central differences of the regularized batch objective, one coordinate at a time.
pub fn finite_diff_gradient(
    model: &ModelSpec,
    params: &[f64],
    batch: &[usize],
    data: &Dataset,
    rel_step: f64,
) -> Result<Vec<f64>> {
    if !(rel_step > 0.0 && rel_step.is_finite()) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {rel_step}")));
    }
    let mut w = params.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        let eps = rel_step * (1.0 + params[j].abs());
        w[j] = params[j] + eps;
        let plus = model.batch_objective(&w, batch, data)?;
        w[j] = params[j] - eps;
        let minus = model.batch_objective(&w, batch, data)?;
        w[j] = params[j];
        let d = (plus - minus) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference gradient",
            });
        }
        out.push(d);
    }
    Ok(out)
}

/// `max_j |a_j - b_j| / max(||a||_inf, ||b||_inf)`; zero when both vectors vanish.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Per-coordinate mean of squared single-example gradients, one backward pass per
/// example. The slow reference for the fused second moment.
pub fn per_example_second_moment(
    model: &ModelSpec,
    params: &[f64],
    batch: &[usize],
    data: &Dataset,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.num_params()];
    for &i in batch {
        let single = model.evaluate_batch(params, &[i], data)?;
        for (a, g) in acc.iter_mut().zip(&single.loss_grad) {
            *a += g * g;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Per-coordinate `|mean(S_j) - (m-1)/m sigma_j^2| / ((m-1)/m sigma_j^2)` over `trials`
/// batches of `m` i.i.d. `N(0, diag(sigma^2))` per-example gradients.
pub fn variance_bias_check(noise_var: &[f64], m: usize, trials: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::contract("batch size must be >= 2"));
    }
    if trials == 0 {
        return Err(Error::contract("need at least one trial"));
    }
    let d = noise_var.len();
    let sd: Vec<f64> = noise_var.iter().map(|v| v.sqrt()).collect();
    let mut mean_s = vec![0.0; d];
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..trials {
        sum.iter_mut().for_each(|x| *x = 0.0);
        sum_sq.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..m {
            for j in 0..d {
                let x = sd[j] * rng.sample::<f64, _>(StandardNormal);
                sum[j] += x;
                sum_sq[j] += x * x;
            }
        }
        let g: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
        let q: Vec<f64> = sum_sq.iter().map(|s| s / m as f64).collect();
        let s = sample_variance(&q, &g)?;
        for (acc, sj) in mean_s.iter_mut().zip(&s.per_coord) {
            *acc += sj;
        }
    }
    let factor = (m as f64 - 1.0) / m as f64;
    Ok(mean_s
        .iter()
        .zip(noise_var)
        .map(|(total, var)| {
            let observed = total / trials as f64;
            let expected = factor * var;
            if expected == 0.0 {
                if observed == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (observed - expected).abs() / expected
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityCheck {
    /// `||grad F||^2 == 2 h (F - F*)` to 1e-10 relative; only for scalar Hessians.
    pub scalar_identity: Option<bool>,
    /// `||grad F||^2 >= 2 mu (F - F*)` up to one machine epsilon. When the bound is tight
    /// (scalar Hessians, `w - w*` along the softest direction) rounding decides this flag.
    pub strong_convexity_bound: bool,
}

pub fn convexity_bound_check(oracle: &QuadraticOracle, w: &[f64]) -> Result<ConvexityCheck> {
    let grad = oracle.gradient(w)?;
    let grad_sq = dot(&grad, &grad);
    // F - F* = (w - w*)^T H (w - w*) / 2 = (w - w*)^T grad / 2, without cancelling F*.
    let disp: Vec<f64> = w.iter().zip(oracle.optimum()).map(|(a, b)| a - b).collect();
    let excess = 0.5 * dot(&disp, &grad);
    let scalar_identity = match oracle.curvature() {
        Curvature::Scalar(h) => {
            let rhs = 2.0 * h * excess;
            let scale = grad_sq.abs().max(rhs.abs());
            Some((grad_sq - rhs).abs() <= 1e-10 * scale)
        }
        Curvature::Dense(_) => None,
    };
    let rhs = 2.0 * oracle.strong_convexity() * excess;
    let strong_convexity_bound = grad_sq >= rhs - f64::EPSILON * grad_sq.abs().max(rhs.abs());
    Ok(ConvexityCheck {
        scalar_identity,
        strong_convexity_bound,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Random feasible gain model: `L` log-uniform in `[0.1, 10]`, `alpha` log-uniform in
/// `[1e-3, 1]` redrawn until `L alpha <= 1.9`, `tr(Sigma)` log-uniform in `[1e-2, 1e3]`
/// and `||grad F||^2` log-uniform in `[1, 1e2]`. The optimum then lies below 4e4.
pub fn random_gain_model(rng: &mut Rng) -> GainModel {
    let lipschitz = log_uniform(rng, 0.1, 10.0);
    let learning_rate = loop {
        let a = log_uniform(rng, 1e-3, 1.0);
        if lipschitz * a <= 1.9 {
            break a;
        }
    };
    GainModel {
        learning_rate,
        lipschitz,
        grad_norm_sq: log_uniform(rng, 1.0, 1e2),
        trace: log_uniform(rng, 1e-2, 1e3),
    }
}

/// Random PSD quadratic `H = Q diag(lambda) Q^T` in `dim` dimensions with eigenvalues
/// log-uniform in `[1e-2, 10]`. Returns the oracle and the eigenvalues used.
pub fn random_psd_quadratic(rng: &mut Rng, dim: usize) -> Result<(QuadraticOracle, Vec<f64>)> {
    let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = gauss.qr().q();
    let eig: Vec<f64> = (0..dim).map(|_| log_uniform(rng, 1e-2, 10.0)).collect();
    let h = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.clone())) * q.transpose();
    // Symmetrize away rounding so the oracle accepts it.
    let hessian = Array2::from_shape_fn((dim, dim), |(i, j)| 0.5 * (h[(i, j)] + h[(j, i)]));
    let optimum: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let f_star = rng.random::<f64>();
    let oracle = QuadraticOracle::dense(hessian, optimum, f_star, vec![0.0; dim])?;
    Ok((oracle, eig))
}

/// Outcome of one validation suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the suite's metric.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckReport {
    /// `CHECK name=.. status=.. metric=.. threshold=..`
    pub fn summary_line(&self) -> String {
        format!(
            "CHECK name={} status={} metric={:e} threshold={:e}",
            self.name,
            if self.passed { "pass" } else { "fail" },
            self.metric,
            self.threshold
        )
    }
}

/// Mean sample variance vs `(m-1)/m sigma^2` for `sigma^2 in {0.25, 1, 4}`,
/// `m in {2, 4, 16, 64}`, 10^4 batches each; 2% relative tolerance.
pub fn check_variance_bias(seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 0);
    let var = [0.25, 1.0, 4.0];
    let mut worst = 0.0f64;
    for m in [2, 4, 16, 64] {
        for e in variance_bias_check(&var, m, 10_000, &mut rng)? {
            worst = worst.max(e);
        }
    }
    Ok(CheckReport {
        name: "variance_bias",
        passed: worst <= 0.02,
        metric: worst,
        threshold: 0.02,
        detail: "max relative error of mean(S) vs (m-1)/m sigma^2".into(),
    })
}

/// Fused second moments vs single-example backprop on 100 random dense stacks
/// (1 to 3 layers, widths up to 32, batch sizes up to 64).
pub fn check_fused_second_moment(seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 1);
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let layers = rng.random_range(1..=3usize);
        let mut widths: Vec<usize> = (0..layers).map(|_| rng.random_range(2..=32usize)).collect();
        let classes = rng.random_range(2..=8usize);
        let dim = widths[0].max(classes);
        widths[0] = dim;
        widths.push(classes);
        let model = if layers == 1 {
            ModelSpec::logistic_regression(dim, classes)
        } else {
            ModelSpec::mlp(widths)
        };
        let m = rng.random_range(2..=64usize);
        let data = generate_gaussian_blobs(classes, dim, classes * 16, 2.0, seed ^ case)?;
        let params = model.init_params(&mut rng);
        let batch: Vec<usize> = (0..m).map(|_| rng.random_range(0..data.len())).collect();
        let fused = model.evaluate_batch(&params, &batch, &data)?.second_moment;
        let slow = per_example_second_moment(&model, &params, &batch, &data)?;
        for (a, b) in fused.iter().zip(&slow) {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    Ok(CheckReport {
        name: "fused_second_moment",
        passed: worst <= 1e-12,
        metric: worst,
        threshold: 1e-12,
        detail: "max per-coordinate relative error, fused vs per-example loop".into(),
    })
}

/// Initialized parameters plus `N(0, 0.1^2)` on every coordinate. Zero biases put
/// hidden units whose inputs are all dead exactly on the ReLU kink, where the two
/// methods legitimately disagree.
pub fn generic_point(model: &ModelSpec, rng: &mut Rng) -> Vec<f64> {
    let mut params = model.init_params(rng);
    for p in &mut params {
        *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    params
}

/// Backprop vs central differences on logistic regression and MLPs.
pub fn check_gradients(seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 2);
    let mut worst = 0.0f64;
    let cases = [
        (ModelSpec::logistic_regression(3, 2), 4usize),
        (ModelSpec::logistic_regression(10, 4).with_l2(0.05), 8),
        (ModelSpec::logistic_regression(20, 5), 32),
        (ModelSpec::mlp(vec![8, 12, 3]), 16),
        (ModelSpec::mlp(vec![6, 8, 8, 4]).with_l2(0.01), 64),
        (ModelSpec::mlp(vec![5, 20, 2]).with_loss_scale(10.0), 32),
    ];
    for (k, (model, m)) in cases.iter().enumerate() {
        debug_assert!(model.num_params() <= 200);
        let classes = model.num_classes().expect("classifier");
        let data = generate_gaussian_blobs(classes, model.input_dim(), classes * 20, 1.5, seed + k as u64)?;
        let params = generic_point(model, &mut rng);
        let batch: Vec<usize> = (0..*m).map(|_| rng.random_range(0..data.len())).collect();
        let analytic = model.evaluate_batch(&params, &batch, &data)?.grad;
        let numeric = finite_diff_gradient(model, &params, &batch, &data, FD_REL_STEP)?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(CheckReport {
        name: "gradient_finite_difference",
        passed: worst <= 1e-5,
        metric: worst,
        threshold: 1e-5,
        detail: "max relative error (infinity norm), backprop vs central differences".into(),
    })
}

/// Integer scan of expected gain per example vs the rounded closed form, 100 models.
pub fn check_optimal_batch(seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let gm = random_gain_model(&mut rng);
        let scanned = brute_force_optimal_batch(&gm, 1..=100_000)?;
        let closed = lipschitz_oracle_batch_size(gm.lipschitz, gm.learning_rate, gm.trace, gm.grad_norm_sq)?;
        worst = worst.max((scanned as f64 - closed.round()).abs());
    }
    Ok(CheckReport {
        name: "optimal_batch_closed_form",
        passed: worst <= 1.0,
        metric: worst,
        threshold: 1.0,
        detail: "max |argmax scan - round(closed form)|".into(),
    })
}

/// Lipschitz-oracle rule vs CABS-with-F* on scalar-Hessian quadratics at `alpha = 1/h`.
pub fn check_derivation_chain(seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=20usize);
        let h = log_uniform(&mut rng, 1e-2, 1e2);
        let optimum: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let noise: Vec<f64> = (0..dim).map(|_| log_uniform(&mut rng, 1e-3, 10.0)).collect();
        let f_star = rng.random::<f64>();
        let oracle = QuadraticOracle::scalar(h, optimum.clone(), f_star, noise)?;
        let w: Vec<f64> = optimum.iter().map(|x| x + rng.sample::<f64, _>(StandardNormal)).collect();
        let alpha = 1.0 / h;
        let g = oracle.gradient(&w)?;
        let oracle_rule = lipschitz_oracle_batch_size(h, alpha, oracle.noise_trace(), dot(&g, &g))?;
        let cabs_rule = cabs_with_fstar_batch_size(alpha, oracle.noise_trace(), oracle.value(&w)?, f_star);
        worst = worst.max((oracle_rule - cabs_rule).abs() / oracle_rule.abs());
    }
    Ok(CheckReport {
        name: "scalar_hessian_derivation",
        passed: worst <= 1e-10,
        metric: worst,
        threshold: 1e-10,
        detail: "max relative gap between the two batch-size rules".into(),
    })
}

/// `expected_gain > 0` exactly when `alpha` is below the noise-dependent bound.
pub fn check_gain_sign_boundary(seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 5);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let base = random_gain_model(&mut rng);
        let m = rng.random_range(1..=256usize);
        let bound = base.max_learning_rate(m);
        for factor in [0.5, 0.9, 0.99, 1.01, 1.1, 1.5] {
            let gm = GainModel {
                learning_rate: factor * bound,
                ..base
            };
            if (expected_gain(&gm, m) > 0.0) != (factor < 1.0) {
                violations += 1;
            }
        }
    }
    Ok(CheckReport {
        name: "gain_sign_boundary",
        passed: violations == 0,
        metric: violations as f64,
        threshold: 0.0,
        detail: "sign disagreements straddling the learning-rate bound".into(),
    })
}

/// `||g - grad|| < ||g||` implies `<g, grad> > 0` on `samples` random pairs that meet the condition.
pub fn check_descent_direction(seed: u64, samples: usize) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 6);
    let mut checked = 0usize;
    let mut violations = 0usize;
    while checked < samples {
        let d = rng.random_range(1..=10usize);
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let dir_norm = norm(&dir);
        if dir_norm == 0.0 || norm(&g) == 0.0 {
            continue;
        }
        // Perturbation radius up to 1.2 ||g||, so pairs near the boundary are common.
        let radius = 1.2 * rng.random::<f64>() * norm(&g);
        let grad: Vec<f64> = g
            .iter()
            .zip(&dir)
            .map(|(a, u)| a + radius * u / dir_norm)
            .collect();
        let res = descent_direction_check(&g, &grad)?;
        if res.condition {
            checked += 1;
            violations += usize::from(!res.implication_holds);
        }
    }
    Ok(CheckReport {
        name: "descent_direction",
        passed: violations == 0,
        metric: violations as f64,
        threshold: 0.0,
        detail: format!("violations among {samples} pairs meeting the condition"),
    })
}

/// Strong-convexity bound on `samples` random PSD quadratics (dimension 1 to 20).
/// Each instance also checks the oracle's `mu` against the eigenvalues it was built from.
pub fn check_convexity(seed: u64, samples: usize) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 7);
    let mut violations = 0usize;
    for _ in 0..samples {
        let dim = rng.random_range(1..=20usize);
        let (oracle, eig) = random_psd_quadratic(&mut rng, dim)?;
        let mu = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = (0..dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let res = convexity_bound_check(&oracle, &w)?;
        let mu_ok = (oracle.strong_convexity() - mu).abs() <= 1e-9 * eig.iter().copied().fold(0.0, f64::max);
        violations += usize::from(!res.strong_convexity_bound || !mu_ok);
    }
    Ok(CheckReport {
        name: "strong_convexity_bound",
        passed: violations == 0,
        metric: violations as f64,
        threshold: 0.0,
        detail: format!("violations among {samples} random PSD quadratics"),
    })
}

/// Scalar-Hessian identity on random instances, including the optimum itself.
pub fn check_scalar_identity(seed: u64, samples: usize) -> Result<CheckReport> {
    let mut rng = seeded_stream(seed, 8);
    let mut violations = 0usize;
    for k in 0..samples {
        let dim = rng.random_range(1..=20usize);
        let h = log_uniform(&mut rng, 1e-2, 1e2);
        let optimum: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let oracle = QuadraticOracle::scalar(h, optimum.clone(), rng.random(), vec![0.0; dim])?;
        let w: Vec<f64> = if k == 0 {
            optimum
        } else {
            (0..dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let res = convexity_bound_check(&oracle, &w)?;
        // Here the strong-convexity bound is an equality, so its flag only reflects rounding.
        violations += usize::from(res.scalar_identity != Some(true));
    }
    Ok(CheckReport {
        name: "scalar_hessian_identity",
        passed: violations == 0,
        metric: violations as f64,
        threshold: 0.0,
        detail: format!("violations among {samples} scalar quadratics"),
    })
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_variance_bias(seed)?,
        check_fused_second_moment(seed)?,
        check_gradients(seed)?,
        check_optimal_batch(seed)?,
        check_derivation_chain(seed)?,
        check_gain_sign_boundary(seed)?,
        check_descent_direction(seed, 10_000)?,
        check_convexity(seed, 10_000)?,
        check_scalar_identity(seed, 1_000)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn expected_gain_examples() {
        let noiseless = GainModel::new(0.3, 2.0, 5.0, 0.0).unwrap();
        let want = (0.3 - 2.0 * 0.09 / 2.0) * 5.0;
        for m in [1, 7, 1000] {
            assert!((expected_gain(&noiseless, m) - want).abs() < 1e-15);
        }
        let gm = GainModel::new(0.5, 1.0, 4.0, 8.0).unwrap();
        assert!((expected_gain(&gm, 4) - 1.25).abs() < 1e-15);
        let l = 2.5;
        let big = GainModel::new(1.0 / l, l, 3.0, 10.0).unwrap();
        assert!((expected_gain(&big, 1 << 40) - 3.0 / (2.0 * l)).abs() < 1e-9);
    }

    #[test]
    fn integer_scan_example() {
        let gm = GainModel::new(1.0, 1.0, 3.0, 6.0).unwrap();
        let u = |m: usize| expected_gain(&gm, m) / m as f64;
        assert!((u(3) - 1.0 / 6.0).abs() < 1e-12);
        assert!((u(4) - 0.1875).abs() < 1e-12);
        assert!((u(5) - 0.18).abs() < 1e-12);
        assert_eq!(brute_force_optimal_batch(&gm, 1..=100).unwrap(), 4);
    }

    #[test]
    fn tiny_trace_picks_smallest_batch() {
        let gm = GainModel::new(0.1, 1.0, 1.0, 1e-9).unwrap();
        assert_eq!(brute_force_optimal_batch(&gm, 3..=50).unwrap(), 3);
    }

    #[test]
    fn infeasible_scan() {
        let gm = GainModel::new(2.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            brute_force_optimal_batch(&gm, 1..=10),
            Err(Error::InfeasibleStep(_))
        ));
    }

    #[test]
    fn descent_examples() {
        let r = descent_direction_check(&[1.0, 0.0], &[0.9, 0.3]).unwrap();
        assert!(r.condition && r.implication_holds);
        assert!((r.inner_product - 0.9).abs() < 1e-15);
        let g = [0.3, -2.0, 1.0];
        let r = descent_direction_check(&g, &g).unwrap();
        assert!(r.condition);
        assert!((r.inner_product - dot(&g, &g)).abs() < 1e-15);
        assert!(descent_direction_check(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn finite_differences_on_quadratic() {
        let oracle = QuadraticOracle::scalar(2.0, vec![1.0, -1.0, 3.0], 0.5, vec![0.0; 3]).unwrap();
        let model = ModelSpec::quadratic(oracle);
        let data = Dataset::identical(1, 2, 2, 0).unwrap();
        let w = [0.2, 0.4, -0.7];
        let analytic = model.evaluate_batch(&w, &[0], &data).unwrap().grad;
        let numeric = finite_diff_gradient(&model, &w, &[0], &data, FD_REL_STEP).unwrap();
        assert!(max_relative_error(&analytic, &numeric) <= 1e-8);
        assert!(finite_diff_gradient(&model, &w, &[0], &data, 0.0).is_err());
    }

    #[test]
    fn finite_differences_on_logistic() {
        let model = ModelSpec::logistic_regression(3, 2);
        let data = generate_gaussian_blobs(2, 3, 20, 1.0, 1).unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let params = model.init_params(&mut rng);
        let batch = [0, 3, 8, 13];
        let analytic = model.evaluate_batch(&params, &batch, &data).unwrap().grad;
        let numeric = finite_diff_gradient(&model, &params, &batch, &data, FD_REL_STEP).unwrap();
        assert!(max_relative_error(&analytic, &numeric) <= 1e-5);
    }

    #[test]
    fn variance_bias_examples() {
        let mut rng = Rng::seed_from_u64(21);
        let err = variance_bias_check(&[1.0], 4, 10_000, &mut rng).unwrap();
        assert!(err[0] < 0.02, "{err:?}");
        let err = variance_bias_check(&[0.0, 0.0], 4, 10_000, &mut rng).unwrap();
        assert_eq!(err, vec![0.0, 0.0]);
        let err = variance_bias_check(&[4.0], 2, 10_000, &mut rng).unwrap();
        assert!(err[0] < 0.05, "{err:?}");
        assert!(variance_bias_check(&[1.0], 1, 10, &mut rng).is_err());
    }

    #[test]
    fn convexity_examples() {
        let o = QuadraticOracle::scalar(3.0, vec![1.0, 2.0], 0.25, vec![0.0; 2]).unwrap();
        let at_opt = convexity_bound_check(&o, &[1.0, 2.0]).unwrap();
        assert_eq!(at_opt.scalar_identity, Some(true));
        assert!(at_opt.strong_convexity_bound);
        let away = convexity_bound_check(&o, &[-4.0, 7.5]).unwrap();
        assert_eq!(away.scalar_identity, Some(true));
        assert!(away.strong_convexity_bound);
        let mut rng = Rng::seed_from_u64(5);
        let (dense, _) = random_psd_quadratic(&mut rng, 6).unwrap();
        let r = convexity_bound_check(&dense, &[1.0; 6]).unwrap();
        assert_eq!(r.scalar_identity, None);
        assert!(r.strong_convexity_bound);
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn summary_line_format() {
        let r = CheckReport {
            name: "x",
            passed: true,
            metric: 0.5,
            threshold: 1.0,
            detail: String::new(),
        };
        assert_eq!(r.summary_line(), "CHECK name=x status=pass metric=5e-1 threshold=1e0");
    }
}
