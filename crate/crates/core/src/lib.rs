//! Mini-batch SGD whose batch size adapts at runtime.
//!
//! The coupled adaptive batch size (CABS) rule picks the next batch size as
//!
//! ```text
//! m = alpha * tr(Sigma) / F
//! ```
//!
//! where `alpha` is the (constant) learning rate, `tr(Sigma)` is the trace of the
//! per-example gradient covariance and `F` the objective value. Both statistics are
//! estimated from the current mini-batch and smoothed with exponential moving
//! averages, so the batch size for step `k + 1` is fixed before that step starts.
//!
//! Crate layout:
//!
//! - [`models`]: quadratic oracle, softmax regression and ReLU MLPs. Every backward
//!   pass returns the mean gradient *and* the per-coordinate second moment of the
//!   per-example gradients, computed without materializing per-example gradients.
//! - [`grad_stats`]: the sample variance `S`, its 1-norm and the EMA smoothing.
//! - [`batch_policy`]: CABS and the baseline rules (constant, geometric growth,
//!   noisy gradient norm, Lipschitz oracle), plus round-and-clip.
//! - [`optimizer`]: the training loop.
//! - [`data`]: datasets, samplers, Gaussian blobs and the IDX file format.
//! - [`harness`]: config files, learning-rate grids, CSV metrics, the CLI backend.
//! - [`validation`]: independent oracles for the expected-gain analysis and friends.

pub mod batch_policy;
pub mod data;
pub mod error;
pub mod grad_stats;
pub mod harness;
pub mod models;
pub mod optimizer;
pub mod validation;

pub use batch_policy::{BatchSizePolicy, PolicyKind};
pub use data::{Dataset, Sampler, SamplingMode};
pub use error::{Error, Result};
pub use grad_stats::{SmoothedStats, VarianceEstimate};
pub use models::{BatchEvaluation, ModelKind, ModelSpec, QuadraticOracle};
pub use optimizer::{Objective, OptimizerState, StepRecord, TrainConfig, Trainer};

/// Seeded generator used everywhere a run needs randomness.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Independent generator stream `stream` of a run seeded with `seed`.
///
/// Parameter initialization, batch sampling and simulated noise each draw from their
/// own stream, so changing one consumer never shifts another.
pub fn seeded_stream(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
