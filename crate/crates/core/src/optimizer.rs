//! SGD with a batch size chosen one step ahead.
//!
//! Each step draws a batch of the *current* size, evaluates loss, gradient and
//! gradient variance, takes the step `w <- w - alpha g`, folds the new statistics into
//! the moving averages, and only then asks the policy for the size of the *next*
//! batch. A step never re-draws or grows its own batch.

use crate::batch_policy::{BatchSizePolicy, PolicyInputs};
use crate::data::{Dataset, Sampler, SamplingMode};
use crate::error::{Error, Result};
use crate::grad_stats::{sample_variance, sample_variance_corrected, SmoothedStats, DEFAULT_EMA_DECAY};
use crate::models::{BatchEvaluation, ModelSpec, QuadraticOracle};
use crate::{seeded_stream, Rng};

/// Something that can be evaluated on a mini-batch of a requested size.
pub trait Objective {
    fn num_params(&self) -> usize;

    /// Draw a batch of `batch_size` examples and evaluate at `params`.
    fn evaluate(&mut self, params: &[f64], batch_size: usize) -> Result<BatchEvaluation>;

    /// Exact `(tr(Sigma), ||grad F||^2)` at `params`, when the objective knows them.
    fn exact_stats(&self, _params: &[f64]) -> Option<(f64, f64)> {
        None
    }
}

/// A model trained on a dataset through a sampler.
#[derive(Debug)]
pub struct SampledObjective<'a> {
    model: &'a ModelSpec,
    data: &'a Dataset,
    sampler: Sampler,
}

impl<'a> SampledObjective<'a> {
    pub fn new(model: &'a ModelSpec, data: &'a Dataset, sampler: Sampler) -> Result<Self> {
        model.validate()?;
        Ok(Self { model, data, sampler })
    }
}

impl Objective for SampledObjective<'_> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn evaluate(&mut self, params: &[f64], batch_size: usize) -> Result<BatchEvaluation> {
        let batch = self.sampler.sample_batch(batch_size)?;
        self.model.evaluate_batch(params, &batch, self.data)
    }
}

/// The quadratic oracle with simulated Gaussian gradient noise.
#[derive(Debug, Clone)]
pub struct NoisyQuadratic {
    oracle: QuadraticOracle,
    rng: Rng,
}

impl NoisyQuadratic {
    pub fn new(oracle: QuadraticOracle, rng: Rng) -> Self {
        Self { oracle, rng }
    }

    pub fn oracle(&self) -> &QuadraticOracle {
        &self.oracle
    }
}

impl Objective for NoisyQuadratic {
    fn num_params(&self) -> usize {
        self.oracle.dim()
    }

    fn evaluate(&mut self, params: &[f64], batch_size: usize) -> Result<BatchEvaluation> {
        self.oracle.sample_noisy_gradient(params, batch_size, &mut self.rng)
    }

    fn exact_stats(&self, params: &[f64]) -> Option<(f64, f64)> {
        let g = self.oracle.gradient(params).ok()?;
        Some((self.oracle.noise_trace(), g.iter().map(|x| x * x).sum()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// Multiply the variance estimate by `m / (m - 1)`. Off by default.
    pub bessel_correction: bool,
}

impl TrainConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ema_decay: DEFAULT_EMA_DECAY,
            bessel_correction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub params: Vec<f64>,
    /// Batch size the next step will use.
    pub batch_size: usize,
    pub stats: SmoothedStats,
    /// Completed steps.
    pub step: u64,
    /// Sum of the batch sizes of all completed steps.
    pub examples_accessed: u64,
}

/// What happened in one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of this step.
    pub step: u64,
    pub batch_size: usize,
    /// Including this step.
    pub examples_accessed: u64,
    /// Unregularized batch loss at the pre-step parameters.
    pub loss: f64,
    pub objective: f64,
    /// Raw `||S||_1` of this batch.
    pub trace: f64,
    pub xi: f64,
    pub f_avg: f64,
    pub next_batch_size: usize,
}

/// `w - alpha g`.
pub fn sgd_step(params: &[f64], grad: &[f64], learning_rate: f64) -> Result<Vec<f64>> {
    if params.len() != grad.len() {
        return Err(Error::contract(format!(
            "parameters have length {}, gradient {}",
            params.len(),
            grad.len()
        )));
    }
    if learning_rate.is_nan() || learning_rate < 0.0 {
        return Err(Error::contract(format!("learning rate must be >= 0, got {learning_rate}")));
    }
    let next: Vec<f64> = params
        .iter()
        .zip(grad)
        .map(|(w, g)| w - learning_rate * g)
        .collect();
    if next.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { what: "parameters" });
    }
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    policy: BatchSizePolicy,
    config: TrainConfig,
    state: OptimizerState,
}

impl Trainer {
    pub fn new(policy: BatchSizePolicy, config: TrainConfig, initial_params: Vec<f64>) -> Result<Self> {
        policy.validate(config.learning_rate)?;
        let stats = SmoothedStats::new(config.ema_decay)?;
        Ok(Self {
            state: OptimizerState {
                params: initial_params,
                batch_size: policy.initial_batch_size(),
                stats,
                step: 0,
                examples_accessed: 0,
            },
            policy,
            config,
        })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn policy(&self) -> &BatchSizePolicy {
        &self.policy
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    pub fn step(&mut self, objective: &mut dyn Objective) -> Result<StepRecord> {
        let st = &mut self.state;
        let m = st.batch_size;
        let with_context = |loss: f64, err: Error| match err {
            Error::NonFinite { what } => Error::Numerical {
                step: st.step + 1,
                batch_size: m,
                loss,
                what,
            },
            other => other,
        };
        let eval = objective
            .evaluate(&st.params, m)
            .map_err(|e| with_context(f64::NAN, e))?;
        let variance = if self.config.bessel_correction {
            sample_variance_corrected(&eval.second_moment, &eval.loss_grad, m)?
        } else {
            sample_variance(&eval.second_moment, &eval.loss_grad)?
        };
        let params = sgd_step(&st.params, &eval.grad, self.config.learning_rate)
            .map_err(|e| with_context(eval.loss, e))?;
        let grad_norm_sq = eval.grad.iter().map(|g| g * g).sum();

        st.params = params;
        st.stats.update(eval.loss, variance.trace, grad_norm_sq);
        st.step += 1;
        st.examples_accessed += m as u64;

        let inputs = PolicyInputs {
            next_step: st.step,
            xi: st.stats.xi,
            f_avg: st.stats.f_avg,
            grad_norm_sq_avg: st.stats.grad_norm_sq,
            exact: if self.policy.needs_exact_stats() {
                objective.exact_stats(&st.params)
            } else {
                None
            },
        };
        st.batch_size = self.policy.next_batch_size(self.config.learning_rate, &inputs)?;

        Ok(StepRecord {
            step: st.step,
            batch_size: m,
            examples_accessed: st.examples_accessed,
            loss: eval.loss,
            objective: eval.objective,
            trace: variance.trace,
            xi: st.stats.xi,
            f_avg: st.stats.f_avg,
            next_batch_size: st.batch_size,
        })
    }
}

/// Run `steps` iterations from `initial_params` and return every step record.
pub fn run_training(
    objective: &mut dyn Objective,
    policy: BatchSizePolicy,
    config: TrainConfig,
    initial_params: Vec<f64>,
    steps: u64,
) -> Result<(Vec<StepRecord>, OptimizerState)> {
    if steps == 0 {
        return Err(Error::contract("number of steps must be >= 1"));
    }
    if initial_params.len() != objective.num_params() {
        return Err(Error::contract(format!(
            "initial parameters have length {}, objective expects {}",
            initial_params.len(),
            objective.num_params()
        )));
    }
    let mut trainer = Trainer::new(policy, config, initial_params)?;
    let records = (0..steps)
        .map(|_| trainer.step(objective))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, trainer.into_state()))
}

/// Train `model` on `data` with seed-derived initialization and batch sampling.
pub fn run_training_on(
    model: &ModelSpec,
    data: &Dataset,
    policy: BatchSizePolicy,
    config: TrainConfig,
    steps: u64,
    sampling: SamplingMode,
    seed: u64,
) -> Result<(Vec<StepRecord>, OptimizerState)> {
    let params = model.init_params(&mut seeded_stream(seed, 0));
    let sampler = Sampler::from_rng(sampling, data.len(), seeded_stream(seed, 1));
    let mut objective = SampledObjective::new(model, data, sampler)?;
    run_training(&mut objective, policy, config, params, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch_policy::{round_and_clip, PolicyKind};
    use crate::data::generate_gaussian_blobs;

    #[test]
    fn sgd_step_examples() {
        assert_eq!(sgd_step(&[1.0, 1.0], &[1.0, -1.0], 0.1).unwrap(), vec![0.9, 1.1]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[5.0, -7.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[0.0, 0.0], 0.3).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            sgd_step(&[f64::MAX], &[-f64::MAX], 10.0),
            Err(Error::NonFinite { .. })
        ));
        assert!(sgd_step(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn constant_policy_counts_examples() {
        let data = generate_gaussian_blobs(2, 3, 200, 2.0, 0).unwrap();
        let model = ModelSpec::logistic_regression(3, 2);
        let (records, state) = run_training_on(
            &model,
            &data,
            BatchSizePolicy::constant(32),
            TrainConfig::new(0.1),
            100,
            SamplingMode::WithoutReplacement,
            1,
        )
        .unwrap();
        assert_eq!(records.len(), 100);
        assert_eq!(state.examples_accessed, 3200);
        assert!(records.iter().all(|r| r.batch_size == 32));
    }

    #[test]
    fn zero_variance_pins_min_batch() {
        let data = Dataset::identical(4, 64, 2, 3).unwrap();
        let model = ModelSpec::logistic_regression(4, 2);
        let (records, _) = run_training_on(
            &model,
            &data,
            BatchSizePolicy::cabs(),
            TrainConfig::new(0.3),
            200,
            SamplingMode::WithReplacement,
            5,
        )
        .unwrap();
        assert!(records.iter().all(|r| r.batch_size == 16 && r.next_batch_size == 16));
        assert!(records.iter().all(|r| r.trace < 1e-12));
    }

    #[test]
    fn runs_are_deterministic() {
        let data = generate_gaussian_blobs(3, 4, 300, 1.0, 0).unwrap();
        let model = ModelSpec::mlp(vec![4, 8, 3]);
        let run = || {
            run_training_on(
                &model,
                &data,
                BatchSizePolicy::cabs().with_bounds(2, 64),
                TrainConfig::new(0.5),
                150,
                SamplingMode::WithoutReplacement,
                77,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    /// Returns scripted losses and per-example gradient spreads and logs requests.
    struct Spy {
        requested: Vec<usize>,
        k: usize,
    }

    impl Objective for Spy {
        fn num_params(&self) -> usize {
            2
        }

        fn evaluate(&mut self, _params: &[f64], batch_size: usize) -> Result<BatchEvaluation> {
            self.requested.push(batch_size);
            self.k += 1;
            let loss = 1.0 + 1.0 / self.k as f64;
            let spread = 50.0 * self.k as f64;
            Ok(BatchEvaluation {
                loss,
                objective: loss,
                grad: vec![0.1, 0.0],
                loss_grad: vec![0.1, 0.0],
                second_moment: vec![0.01 + spread, spread],
            })
        }
    }

    #[test]
    fn batch_size_is_predicted_from_past_steps_only() {
        let mut spy = Spy {
            requested: vec![],
            k: 0,
        };
        let alpha = 0.2;
        let (records, _) = run_training(
            &mut spy,
            BatchSizePolicy::cabs().with_bounds(2, 100_000),
            TrainConfig::new(alpha),
            vec![0.0, 0.0],
            30,
        )
        .unwrap();
        assert_eq!(spy.requested[0], 2);
        // Recompute the EMAs from the scripted statistics of steps < k.
        let (mut xi, mut f) = (0.0, 0.0);
        for k in 1..30 {
            let prev = &records[k - 1];
            xi = 0.95 * xi + 0.05 * prev.trace;
            f = 0.95 * f + 0.05 * prev.loss;
            assert_eq!(spy.requested[k], round_and_clip(alpha * xi / f, 2, 100_000));
            assert_eq!(records[k].batch_size, spy.requested[k]);
        }
    }

    #[test]
    fn noiseless_quadratic_descends_every_step() {
        let oracle = QuadraticOracle::scalar(4.0, vec![1.0, -1.0, 0.5, 2.0], 0.0, vec![0.0; 4]).unwrap();
        let mut obj = NoisyQuadratic::new(oracle, seeded_stream(0, 0));
        for alpha in [0.05, 0.2, 0.45] {
            let (records, _) = run_training(
                &mut obj,
                BatchSizePolicy::cabs(),
                TrainConfig::new(alpha),
                vec![0.0; 4],
                12,
            )
            .unwrap();
            for pair in records.windows(2) {
                assert!(pair[1].loss < pair[0].loss, "alpha {alpha}: {:?}", pair);
            }
        }
    }

    #[test]
    fn lipschitz_oracle_policy_trains() {
        let oracle = QuadraticOracle::scalar(1.0, vec![3.0; 5], 0.0, vec![2.0; 5]).unwrap();
        let mut obj = NoisyQuadratic::new(oracle, seeded_stream(1, 0));
        let policy = BatchSizePolicy::new(PolicyKind::LipschitzOracle { lipschitz: 1.0 }).with_bounds(2, 4096);
        let (records, state) = run_training(&mut obj, policy, TrainConfig::new(1.0), vec![0.0; 5], 20).unwrap();
        // With L alpha = 1 the rule is 2 tr / ||grad F||^2 = 20 / ||w - w*||^2.
        let first_target = 2.0 * 10.0 / ((3.0f64 - 0.0).powi(2) * 5.0);
        assert_eq!(records[0].batch_size, 2);
        assert!(first_target < 2.0);
        assert!(state.batch_size >= records[1].batch_size);
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let data = generate_gaussian_blobs(2, 3, 100, 1.0, 0).unwrap();
        let model = ModelSpec::mlp(vec![3, 4, 2]).with_loss_scale(1e300);
        let err = run_training_on(
            &model,
            &data,
            BatchSizePolicy::constant(16),
            TrainConfig::new(1e10),
            50,
            SamplingMode::WithReplacement,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "{err}");
    }

    #[test]
    fn rejects_zero_steps_and_bad_params() {
        let oracle = QuadraticOracle::scalar(1.0, vec![0.0; 2], 0.0, vec![0.0; 2]).unwrap();
        let mut obj = NoisyQuadratic::new(oracle, seeded_stream(0, 0));
        assert!(run_training(&mut obj, BatchSizePolicy::cabs(), TrainConfig::new(0.1), vec![0.0; 2], 0).is_err());
        assert!(run_training(&mut obj, BatchSizePolicy::cabs(), TrainConfig::new(0.1), vec![0.0; 3], 5).is_err());
    }
}
