//! Differentiable objectives with fused gradient second moments.
//!
//! Every model evaluates a mini-batch into a [`BatchEvaluation`]: the mean loss, the
//! mean gradient, and the per-coordinate mean of squared per-example gradients `q`.
//!
//! For a dense layer `Z = A W + b`, the per-example weight gradient of example `i` is
//! the outer product `A[i]^T dZ[i]`, where `dZ[i]` is the gradient of that example's
//! *own* loss (not of the batch mean). The batch gradient is `A^T dZ / m`, and the
//! second moment is `(A.^2)^T (dZ.^2) / m`, see [`fused_second_moment`]. Bias second
//! moments are column means of `dZ.^2`.
//!
//! Parameters are one flat vector. Each dense layer contributes its weight matrix
//! (`n_in x n_out`, row-major) followed by its bias (`n_out`).

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad_stats::{sample_variance, VarianceEstimate};
use crate::Rng;

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rows per chunk when scoring a whole dataset.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEvaluation {
    /// Mean unregularized loss `F` over the batch.
    pub loss: f64,
    /// Mean loss plus regularization.
    pub objective: f64,
    /// Gradient of `objective`; this is what the SGD step uses.
    pub grad: Vec<f64>,
    /// Gradient of `loss` (no regularization term).
    pub loss_grad: Vec<f64>,
    /// `q_j = (1/m) sum_i (grad l_i)_j^2` over unregularized per-example gradients.
    pub second_moment: Vec<f64>,
}

impl BatchEvaluation {
    pub fn variance(&self) -> Result<VarianceEstimate> {
        sample_variance(&self.second_moment, &self.loss_grad)
    }

    fn check_finite(&self) -> Result<()> {
        if !self.loss.is_finite() || !self.objective.is_finite() {
            return Err(Error::NonFinite { what: "loss" });
        }
        if self.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient" });
        }
        if self.second_moment.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient second moment",
            });
        }
        Ok(())
    }
}

/// `(A.^2)^T (dZ.^2)`: entry `(j, k)` is `sum_i A[i,j]^2 dZ[i,k]^2`, the sum over
/// examples of the squared per-example weight gradients. Divide by `m` for `q`.
pub fn fused_second_moment(a: ArrayView2<f64>, dz: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != dz.nrows() {
        return Err(Error::contract(format!(
            "fused_second_moment: activations have {} rows, output gradients {}",
            a.nrows(),
            dz.nrows()
        )));
    }
    let a2 = a.mapv(|x| x * x);
    let dz2 = dz.mapv(|x| x * x);
    Ok(a2.t().dot(&dz2))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    /// `H = h I`.
    Scalar(f64),
    /// Symmetric positive semi-definite Hessian.
    Dense(Array2<f64>),
}

/// `F(w) = F* + (w - w*)^T H (w - w*) / 2` with Gaussian per-example gradient noise.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticOracle {
    curvature: Curvature,
    optimum: Vec<f64>,
    f_star: f64,
    /// Per-coordinate variance of a single per-example gradient.
    noise_var: Vec<f64>,
    strong_convexity: f64,
    lipschitz: f64,
}

impl QuadraticOracle {
    pub fn scalar(h: f64, optimum: Vec<f64>, f_star: f64, noise_var: Vec<f64>) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::contract(format!("curvature must be > 0, got {h}")));
        }
        Self::build(Curvature::Scalar(h), optimum, f_star, noise_var, h, h)
    }

    /// General PSD quadratic. Strong convexity and Lipschitz constants are the extreme
    /// eigenvalues of `hessian`.
    pub fn dense(
        hessian: Array2<f64>,
        optimum: Vec<f64>,
        f_star: f64,
        noise_var: Vec<f64>,
    ) -> Result<Self> {
        let d = optimum.len();
        if hessian.dim() != (d, d) {
            return Err(Error::contract(format!(
                "Hessian shape {:?} does not match dimension {d}",
                hessian.dim()
            )));
        }
        let scale = hessian.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (hessian[[i, j]] - hessian[[j, i]]).abs() > 1e-12 * scale {
                    return Err(Error::contract("Hessian must be symmetric"));
                }
            }
        }
        let eig = DMatrix::from_fn(d, d, |i, j| hessian[[i, j]]).symmetric_eigenvalues();
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo < -1e-12 * scale {
            return Err(Error::contract(format!(
                "Hessian must be positive semi-definite, smallest eigenvalue {lo}"
            )));
        }
        Self::build(Curvature::Dense(hessian), optimum, f_star, noise_var, lo.max(0.0), hi)
    }

    fn build(
        curvature: Curvature,
        optimum: Vec<f64>,
        f_star: f64,
        noise_var: Vec<f64>,
        strong_convexity: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        if optimum.is_empty() {
            return Err(Error::contract("quadratic oracle needs dimension >= 1"));
        }
        if noise_var.len() != optimum.len() {
            return Err(Error::contract(format!(
                "noise variance has length {}, optimum {}",
                noise_var.len(),
                optimum.len()
            )));
        }
        if noise_var.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::contract("noise variances must be finite and >= 0"));
        }
        if !f_star.is_finite() {
            return Err(Error::contract("F* must be finite"));
        }
        Ok(Self {
            curvature,
            optimum,
            f_star,
            noise_var,
            strong_convexity,
            lipschitz,
        })
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    pub fn curvature(&self) -> &Curvature {
        &self.curvature
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    /// `tr(Sigma)`, the total per-example gradient variance.
    pub fn noise_trace(&self) -> f64 {
        self.noise_var.iter().sum()
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn displacement(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.dim() {
            return Err(Error::contract(format!(
                "parameter length {} does not match oracle dimension {}",
                w.len(),
                self.dim()
            )));
        }
        Ok(w.iter().zip(&self.optimum).map(|(a, b)| a - b).collect())
    }

    fn apply_hessian(&self, v: &[f64]) -> Vec<f64> {
        match &self.curvature {
            Curvature::Scalar(h) => v.iter().map(|x| h * x).collect(),
            Curvature::Dense(m) => m.dot(&Array1::from(v.to_vec())).to_vec(),
        }
    }

    pub fn value(&self, w: &[f64]) -> Result<f64> {
        let d = self.displacement(w)?;
        let hd = self.apply_hessian(&d);
        Ok(self.f_star + 0.5 * dot(&d, &hd))
    }

    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let d = self.displacement(w)?;
        Ok(self.apply_hessian(&d))
    }

    /// Simulate a mini-batch of `m` per-example gradients `grad F(w) + sigma .* z_i`.
    ///
    /// The mean is distributed as `N(grad F(w), diag(sigma^2) / m)`, and `q` is the
    /// mean of the squared simulated per-example gradients, so the implied sample
    /// variance estimates `diag(sigma^2)` exactly as it would on real data. `F` is the
    /// exact objective.
    pub fn sample_noisy_gradient(&self, w: &[f64], m: usize, rng: &mut Rng) -> Result<BatchEvaluation> {
        if m == 0 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        let loss = self.value(w)?;
        let grad = self.gradient(w)?;
        let sd: Vec<f64> = self.noise_var.iter().map(|v| v.sqrt()).collect();
        let mut sum = vec![0.0; grad.len()];
        let mut sum_sq = vec![0.0; grad.len()];
        for _ in 0..m {
            for j in 0..grad.len() {
                let z: f64 = rng.sample(StandardNormal);
                let gi = grad[j] + sd[j] * z;
                sum[j] += gi;
                sum_sq[j] += gi * gi;
            }
        }
        let inv_m = 1.0 / m as f64;
        let g: Vec<f64> = sum.iter().map(|s| s * inv_m).collect();
        let eval = BatchEvaluation {
            loss,
            objective: loss,
            grad: g.clone(),
            loss_grad: g,
            second_moment: sum_sq.iter().map(|s| s * inv_m).collect(),
        };
        eval.check_finite()?;
        Ok(eval)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Quadratic(QuadraticOracle),
    /// Multinomial logistic regression: one dense layer plus softmax cross-entropy.
    LogisticRegression,
    /// Dense layers with ReLU between them and softmax cross-entropy on top.
    Mlp,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    weight: usize,
    bias: usize,
    n_in: usize,
    n_out: usize,
}

/// A model architecture plus the loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Layer widths, input dimension first, class count last. `[d]` for the quadratic.
    pub widths: Vec<usize>,
    /// L2 coefficient on weights (biases are not penalized).
    pub l2: f64,
    /// Multiplies the whole objective. Used to test unit invariance of the policies.
    pub loss_scale: f64,
}

impl ModelSpec {
    pub fn quadratic(oracle: QuadraticOracle) -> Self {
        let d = oracle.dim();
        Self {
            kind: ModelKind::Quadratic(oracle),
            widths: vec![d],
            l2: 0.0,
            loss_scale: 1.0,
        }
    }

    pub fn logistic_regression(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            widths: vec![input_dim, classes],
            l2: 0.0,
            loss_scale: 1.0,
        }
    }

    /// `widths` = input dimension, hidden widths, class count.
    pub fn mlp(widths: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Mlp,
            widths,
            l2: 0.0,
            loss_scale: 1.0,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn with_loss_scale(mut self, scale: f64) -> Self {
        self.loss_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!("l2 must be finite and >= 0, got {}", self.l2)));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(Error::config(format!(
                "loss scale must be finite and > 0, got {}",
                self.loss_scale
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        match &self.kind {
            ModelKind::Quadratic(o) => {
                if self.l2 != 0.0 {
                    return Err(Error::config("the quadratic oracle takes no regularization"));
                }
                if self.widths != [o.dim()] {
                    return Err(Error::config("quadratic widths must be [dimension]"));
                }
            }
            ModelKind::LogisticRegression => {
                if self.widths.len() != 2 || self.widths[1] < 2 {
                    return Err(Error::config(
                        "logistic regression needs widths [input_dim, classes >= 2]",
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.widths.len() < 2 || *self.widths.last().unwrap() < 2 {
                    return Err(Error::config(
                        "MLP needs widths [input_dim, hidden.., classes >= 2]",
                    ));
                }
            }
        }
        Ok(())
    }

    fn dense_layers(&self) -> Vec<DenseLayer> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let layer = DenseLayer {
                    weight: off,
                    bias: off + w[0] * w[1],
                    n_in: w[0],
                    n_out: w[1],
                };
                off += (w[0] + 1) * w[1];
                layer
            })
            .collect()
    }

    /// `d = sum_l (n_l + 1) n_{l+1}` for dense models.
    pub fn num_params(&self) -> usize {
        match &self.kind {
            ModelKind::Quadratic(o) => o.dim(),
            _ => self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Quadratic(_) => None,
            _ => self.widths.last().copied(),
        }
    }

    /// Dense weights ~ `N(0, 1/n_in)`, biases zero; the quadratic starts at the origin.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        if !matches!(self.kind, ModelKind::Quadratic(_)) {
            for layer in self.dense_layers() {
                let sd = (1.0 / layer.n_in as f64).sqrt();
                for w in &mut params[layer.weight..layer.bias] {
                    *w = sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, model expects {}",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim() {
            return Err(Error::contract(format!(
                "dataset dimension {} does not match model input {}",
                data.dim(),
                self.input_dim()
            )));
        }
        let classes = *self.widths.last().unwrap();
        if data.num_classes > classes {
            return Err(Error::contract(format!(
                "dataset has {} classes, model outputs {classes}",
                data.num_classes
            )));
        }
        Ok(())
    }

    fn check_batch(batch: &[usize], data: &Dataset) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
            return Err(Error::contract(format!(
                "batch index {i} out of range for {} examples",
                data.len()
            )));
        }
        Ok(())
    }

    fn weight_view<'p>(&self, params: &'p [f64], layer: &DenseLayer) -> ArrayView2<'p, f64> {
        ArrayView2::from_shape((layer.n_in, layer.n_out), &params[layer.weight..layer.bias])
            .expect("layer slice matches its shape")
    }

    /// Forward pass; returns the input of every dense layer and the final logits.
    fn forward(&self, params: &[f64], x: Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let layers = self.dense_layers();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut a = x;
        for (l, layer) in layers.iter().enumerate() {
            let w = self.weight_view(params, layer);
            let b = &params[layer.bias..layer.bias + layer.n_out];
            let mut z = a.dot(&w);
            for mut row in z.rows_mut() {
                row.iter_mut().zip(b).for_each(|(zi, bi)| *zi += bi);
            }
            inputs.push(a);
            if l + 1 == layers.len() {
                return (inputs, z);
            }
            z.mapv_inplace(|v| v.max(0.0));
            a = z;
        }
        unreachable!("dense model has at least one layer")
    }

    /// Regularization term `(lambda/2) ||W||^2` over all weights, before loss scaling.
    fn penalty(&self, params: &[f64]) -> f64 {
        if self.l2 == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .dense_layers()
            .iter()
            .map(|l| params[l.weight..l.bias].iter().map(|w| w * w).sum::<f64>())
            .sum();
        0.5 * self.l2 * sq
    }

    /// Loss, gradient and per-coordinate gradient second moment on `batch`.
    pub fn evaluate_batch(&self, params: &[f64], batch: &[usize], data: &Dataset) -> Result<BatchEvaluation> {
        self.check_params(params)?;
        let c = self.loss_scale;
        let eval = match &self.kind {
            ModelKind::Quadratic(oracle) => {
                // Deterministic oracle: every "example" has the exact gradient.
                let loss = c * oracle.value(params)?;
                let g: Vec<f64> = oracle.gradient(params)?.iter().map(|x| c * x).collect();
                BatchEvaluation {
                    loss,
                    objective: loss,
                    second_moment: g.iter().map(|x| x * x).collect(),
                    grad: g.clone(),
                    loss_grad: g,
                }
            }
            _ => {
                self.check_data(data)?;
                Self::check_batch(batch, data)?;
                self.evaluate_dense(params, batch, data)?
            }
        };
        eval.check_finite()?;
        Ok(eval)
    }

    fn evaluate_dense(&self, params: &[f64], batch: &[usize], data: &Dataset) -> Result<BatchEvaluation> {
        let m = batch.len();
        let inv_m = 1.0 / m as f64;
        let c = self.loss_scale;
        let x = data.features.select(Axis(0), batch);
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let (inputs, logits) = self.forward(params, x);
        let (losses, mut dz) = softmax_cross_entropy(logits, &labels);
        // Per-example gradients of c * l_i.
        dz.mapv_inplace(|v| c * v);
        let loss = c * losses.iter().sum::<f64>() * inv_m;

        let d = self.num_params();
        let mut loss_grad = vec![0.0; d];
        let mut second_moment = vec![0.0; d];
        let layers = self.dense_layers();
        for (l, layer) in layers.iter().enumerate().rev() {
            let a = &inputs[l];
            let gw = a.t().dot(&dz);
            let qw = fused_second_moment(a.view(), dz.view())?;
            let out_w = layer.weight..layer.bias;
            for ((g, q), (gi, qi)) in loss_grad[out_w.clone()]
                .iter_mut()
                .zip(&mut second_moment[out_w])
                .zip(gw.iter().zip(qw.iter()))
            {
                *g = gi * inv_m;
                *q = qi * inv_m;
            }
            let out_b = layer.bias..layer.bias + layer.n_out;
            let gb = dz.sum_axis(Axis(0));
            let qb = dz.mapv(|v| v * v).sum_axis(Axis(0));
            for ((g, q), (gi, qi)) in loss_grad[out_b.clone()]
                .iter_mut()
                .zip(&mut second_moment[out_b])
                .zip(gb.iter().zip(qb.iter()))
            {
                *g = gi * inv_m;
                *q = qi * inv_m;
            }
            if l > 0 {
                let w = self.weight_view(params, layer);
                let mut da = dz.dot(&w.t());
                // ReLU: a layer input is positive exactly where its pre-activation was.
                da.zip_mut_with(a, |g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
                dz = da;
            }
        }

        let mut grad = loss_grad.clone();
        if self.l2 > 0.0 {
            for layer in &layers {
                for (g, w) in grad[layer.weight..layer.bias]
                    .iter_mut()
                    .zip(&params[layer.weight..layer.bias])
                {
                    *g += c * self.l2 * w;
                }
            }
        }
        Ok(BatchEvaluation {
            loss,
            objective: loss + c * self.penalty(params),
            grad,
            loss_grad,
            second_moment,
        })
    }

    /// Regularized batch-mean objective only (no backward pass).
    pub fn batch_objective(&self, params: &[f64], batch: &[usize], data: &Dataset) -> Result<f64> {
        self.check_params(params)?;
        let value = match &self.kind {
            ModelKind::Quadratic(oracle) => self.loss_scale * oracle.value(params)?,
            _ => {
                self.check_data(data)?;
                Self::check_batch(batch, data)?;
                let x = data.features.select(Axis(0), batch);
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                let (_, logits) = self.forward(params, x);
                let (losses, _) = softmax_cross_entropy(logits, &labels);
                let mean = losses.iter().sum::<f64>() / batch.len() as f64;
                self.loss_scale * (mean + self.penalty(params))
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "loss" });
        }
        Ok(value)
    }

    /// Mean unregularized loss and classification accuracy over all of `data`,
    /// processed in a fixed order. The quadratic reports its exact value and NaN accuracy.
    pub fn score(&self, params: &[f64], data: &Dataset) -> Result<(f64, f64)> {
        self.check_params(params)?;
        if let ModelKind::Quadratic(oracle) = &self.kind {
            return Ok((self.loss_scale * oracle.value(params)?, f64::NAN));
        }
        self.check_data(data)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(data.len());
            let x = data.features.slice(s![start..end, ..]).to_owned();
            let labels = &data.labels[start..end];
            let (_, logits) = self.forward(params, x);
            for (row, &y) in logits.rows().into_iter().zip(labels) {
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0;
                correct += usize::from(argmax == y);
            }
            let (losses, _) = softmax_cross_entropy(logits, labels);
            loss_sum += losses.iter().sum::<f64>();
        }
        let loss = self.loss_scale * loss_sum / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss" });
        }
        Ok((loss, correct as f64 / data.len() as f64))
    }
}

/// Per-example losses `-ln p_y` and their logit gradients `p - onehot(y)`.
fn softmax_cross_entropy(mut logits: Array2<f64>, labels: &[usize]) -> (Vec<f64>, Array2<f64>) {
    let mut losses = Vec::with_capacity(labels.len());
    for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
        losses.push(-row[y].max(PROB_FLOOR).ln());
        row[y] -= 1.0;
    }
    (losses, logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gaussian_blobs;
    use ndarray::array;
    use rand::SeedableRng;

    fn per_example_oracle(a: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((a.ncols(), dz.ncols()));
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                for k in 0..dz.ncols() {
                    let g = a[[i, j]] * dz[[i, k]];
                    out[[j, k]] += g * g;
                }
            }
        }
        out
    }

    #[test]
    fn fused_single_example() {
        let r = fused_second_moment(array![[2.0]].view(), array![[3.0]].view()).unwrap();
        assert_eq!(r, array![[36.0]]);
    }

    #[test]
    fn fused_two_examples() {
        let r = fused_second_moment(array![[1.0], [2.0]].view(), array![[1.0], [1.0]].view()).unwrap();
        assert_eq!(r, array![[5.0]]);
    }

    #[test]
    fn fused_matches_loop_on_random_shape() {
        let mut rng = Rng::seed_from_u64(4);
        let a = Array2::from_shape_fn((4, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let dz = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let fused = fused_second_moment(a.view(), dz.view()).unwrap();
        let slow = per_example_oracle(&a, &dz);
        for (x, y) in fused.iter().zip(slow.iter()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn fused_shape_mismatch() {
        let err = fused_second_moment(Array2::zeros((3, 2)).view(), Array2::zeros((4, 2)).view());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_count() {
        assert_eq!(ModelSpec::mlp(vec![4, 8, 3]).num_params(), 5 * 8 + 9 * 3);
        assert_eq!(ModelSpec::logistic_regression(20, 2).num_params(), 42);
    }

    #[test]
    fn uniform_softmax_loss_is_ln_classes() {
        let data = generate_gaussian_blobs(10, 10, 50, 3.0, 0).unwrap();
        let model = ModelSpec::mlp(vec![10, 6, 10]);
        let params = vec![0.0; model.num_params()];
        let ev = model.evaluate_batch(&params, &[0, 5, 7, 30], &data).unwrap();
        assert!((ev.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_at_optimum() {
        let o = QuadraticOracle::scalar(2.0, vec![1.0, -2.0, 0.5], 0.75, vec![1.0; 3]).unwrap();
        let model = ModelSpec::quadratic(o);
        let data = Dataset::identical(1, 2, 2, 0).unwrap();
        let ev = model.evaluate_batch(&[1.0, -2.0, 0.5], &[0, 1], &data).unwrap();
        assert_eq!(ev.loss, 0.75);
        assert!(ev.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn noiseless_oracle_returns_exact_gradient() {
        let o = QuadraticOracle::scalar(3.0, vec![1.0, 2.0], 0.0, vec![0.0; 2]).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let w = [0.0, 0.5];
        for _ in 0..5 {
            let ev = o.sample_noisy_gradient(&w, 7, &mut rng).unwrap();
            assert_eq!(ev.grad, vec![-3.0, -4.5]);
        }
        let ev = o.sample_noisy_gradient(&[1.0, 2.0], 3, &mut rng).unwrap();
        assert_eq!(ev.grad, vec![0.0, 0.0]);
        assert_eq!(ev.loss, 0.0);
    }

    #[test]
    fn noisy_gradient_covariance() {
        let var = vec![0.5, 2.0, 8.0];
        let o = QuadraticOracle::scalar(1.0, vec![0.0; 3], 0.0, var.clone()).unwrap();
        let w = [1.0, -1.0, 2.0];
        let mut rng = Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..n {
            let ev = o.sample_noisy_gradient(&w, 4, &mut rng).unwrap();
            for j in 0..3 {
                sum[j] += ev.grad[j];
                sum_sq[j] += ev.grad[j] * ev.grad[j];
            }
        }
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let cov = sum_sq[j] / n as f64 - mean * mean;
            let want = var[j] / 4.0;
            assert!((cov - want).abs() / want < 0.03, "coord {j}: {cov} vs {want}");
        }
    }

    #[test]
    fn jensen_bound_holds_on_batches() {
        let data = generate_gaussian_blobs(3, 5, 90, 1.5, 2).unwrap();
        let model = ModelSpec::mlp(vec![5, 7, 3]).with_l2(0.1);
        let mut rng = Rng::seed_from_u64(3);
        let params = model.init_params(&mut rng);
        let ev = model.evaluate_batch(&params, &(0..32).collect::<Vec<_>>(), &data).unwrap();
        for (q, g) in ev.second_moment.iter().zip(&ev.loss_grad) {
            assert!(*q >= g * g - f64::EPSILON * q.abs().max(g * g));
        }
        assert!(ev.objective > ev.loss);
    }

    #[test]
    fn bias_second_moment_is_column_mean_of_squares() {
        // One dense layer, two examples; check q for the bias directly.
        let data = Dataset::new("t", array![[1.0, 0.0], [0.0, 2.0]], vec![0, 1], 2).unwrap();
        let model = ModelSpec::logistic_regression(2, 2);
        let params = vec![0.0; model.num_params()];
        let ev = model.evaluate_batch(&params, &[0, 1], &data).unwrap();
        // Uniform softmax: dZ rows are (-0.5, 0.5) and (0.5, -0.5).
        assert_eq!(&ev.second_moment[4..6], &[0.25, 0.25]);
        assert_eq!(&ev.loss_grad[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn contract_errors() {
        let data = generate_gaussian_blobs(2, 3, 10, 1.0, 0).unwrap();
        let model = ModelSpec::logistic_regression(3, 2);
        let p = vec![0.0; model.num_params()];
        assert!(model.evaluate_batch(&p[1..], &[0, 1], &data).is_err());
        assert!(model.evaluate_batch(&p, &[0, 10], &data).is_err());
        assert!(model.evaluate_batch(&p, &[], &data).is_err());
        let wrong = ModelSpec::logistic_regression(4, 2);
        assert!(wrong.evaluate_batch(&vec![0.0; wrong.num_params()], &[0, 1], &data).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let data = generate_gaussian_blobs(2, 3, 10, 1.0, 0).unwrap();
        let model = ModelSpec::logistic_regression(3, 2);
        let p = vec![f64::MAX; model.num_params()];
        assert!(matches!(
            model.evaluate_batch(&p, &[0, 1], &data),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn dense_oracle_constants() {
        let h = array![[2.0, 1.0], [1.0, 2.0]];
        let o = QuadraticOracle::dense(h, vec![0.0, 0.0], 0.0, vec![0.0, 0.0]).unwrap();
        assert!((o.strong_convexity() - 1.0).abs() < 1e-12);
        assert!((o.lipschitz() - 3.0).abs() < 1e-12);
        assert!(QuadraticOracle::dense(array![[1.0, 2.0], [2.0, 1.0]], vec![0.0; 2], 0.0, vec![0.0; 2]).is_err());
        assert!(QuadraticOracle::dense(array![[1.0, 2.0], [0.0, 1.0]], vec![0.0; 2], 0.0, vec![0.0; 2]).is_err());
        assert!(QuadraticOracle::scalar(0.0, vec![0.0], 0.0, vec![0.0]).is_err());
        assert!(QuadraticOracle::scalar(1.0, vec![0.0], 0.0, vec![-1.0]).is_err());
    }

    #[test]
    fn scalar_quadratic_gradient_identity() {
        let h = 1.7;
        let o = QuadraticOracle::scalar(h, vec![0.3, -0.2, 1.1], 0.4, vec![0.0; 3]).unwrap();
        let w = [2.0, 1.0, -3.0];
        let g = o.gradient(&w).unwrap();
        let lhs = dot(&g, &g);
        let rhs = 2.0 * h * (o.value(&w).unwrap() - 0.4);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs);
    }

    #[test]
    fn score_reports_accuracy() {
        let data = generate_gaussian_blobs(2, 2, 200, 20.0, 0).unwrap();
        let model = ModelSpec::logistic_regression(2, 2);
        // Logit_k = x_k picks the larger coordinate.
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let (loss, acc) = model.score(&params, &data).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss < 1e-3);
    }
}
