//! Experiment configuration, single runs, learning-rate grids and CSV metrics.
//!
//! Config files are plain text with one `key = value` per line. Keys are dotted
//! (`policy.kind = cabs`), `#` starts a comment, and a key may appear only once.
//! Unknown keys are rejected. The README lists every key.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::batch_policy::{BatchSizePolicy, PolicyKind, DEFAULT_MAX_BATCH, DEFAULT_MIN_BATCH};
use crate::data::{generate_gaussian_blobs, load_idx, Dataset, IdxTensor, Sampler, SamplingMode};
use crate::error::{Error, Result};
use crate::grad_stats::DEFAULT_EMA_DECAY;
use crate::models::{ModelKind, ModelSpec, QuadraticOracle};
use crate::optimizer::{NoisyQuadratic, Objective, OptimizerState, SampledObjective, TrainConfig, Trainer};
use crate::seeded_stream;

/// Environment variable holding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "CABS_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "results";

pub const CSV_HEADER: &str = "step,examples_accessed,batch_size,train_loss,test_accuracy,trace_sigma_est,f_avg";
const GRID_HEADER: &str =
    "learning_rate,theta,status,final_test_accuracy,best_test_accuracy,final_train_loss,steps,examples_accessed,failure";

/// Learning rates used when a config asks for `train.learning_rates = default`.
pub const DEFAULT_LEARNING_RATES: [f64; 6] = [0.3, 0.1, 0.06, 0.03, 0.01, 0.006];
/// Thetas used when a config asks for `train.thetas = default`.
pub const DEFAULT_THETAS: [f64; 3] = [0.6, 0.8, 1.0];

/// Raw `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", n + 1)));
            }
            if map.entries.insert(key.to_owned(), value.trim().to_owned()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(map)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Apply a command-line override of the form `--key=value`.
    pub fn apply_override(&mut self, arg: &str) -> Result<()> {
        let body = arg.strip_prefix("--").unwrap_or(arg);
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{arg}` is not of the form --key=value")))?;
        if key.trim().is_empty() {
            return Err(Error::config(format!("override `{arg}` has an empty key")));
        }
        self.set(key.trim(), value.trim());
        Ok(())
    }
}

/// Typed access that remembers which keys were read.
struct Reader<'a> {
    map: &'a ConfigMap,
    used: BTreeSet<&'a str>,
}

impl<'a> Reader<'a> {
    fn new(map: &'a ConfigMap) -> Self {
        Self {
            map,
            used: BTreeSet::new(),
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.insert(key);
        self.map.get(key)
    }

    fn get<T: FromStr>(&mut self, key: &'static str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn get_or<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&mut self, key: &'static str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::config(format!("missing required key `{key}`")))
    }

    fn list<T: FromStr>(&mut self, key: &'static str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("`{key}`: cannot parse `{}`", s.trim())))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn f64_list_or_default(&mut self, key: &'static str, default: &[f64]) -> Result<Option<Vec<f64>>> {
        if self.map.get(key) == Some("default") {
            self.used.insert(key);
            return Ok(Some(default.to_vec()));
        }
        self.list(key)
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .map
            .entries
            .keys()
            .map(String::as_str)
            .filter(|k| !self.used.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    Logistic,
    Mlp { hidden: Vec<usize> },
    /// Scalar-Hessian quadratic `h/2 ||w - w*||^2 + F*` with isotropic gradient noise.
    Quadratic {
        dim: usize,
        curvature: f64,
        noise_var: f64,
        f_star: f64,
        optimum: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        count: usize,
        separation: f64,
    },
    /// Copies of a single example; every per-example gradient is the same.
    Identical { dim: usize, count: usize, classes: usize },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
    /// The quadratic oracle needs no data.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LearningRates {
    Single(f64),
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stopping {
    Steps(u64),
    /// Stop once at least this many examples have been accessed.
    Budget(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub l2: f64,
    pub loss_scale: f64,
    pub data: DataSource,
    pub data_seed: u64,
    pub test_fraction: f64,
    pub standardize: bool,
    pub sampling: SamplingMode,
    pub policy: BatchSizePolicy,
    pub learning_rates: LearningRates,
    pub thetas: Option<Vec<f64>>,
    pub stopping: Stopping,
    /// In examples accessed; `None` means every 5% of the run.
    pub eval_interval: Option<u64>,
    pub ema_decay: f64,
    pub bessel_correction: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub name: String,
}

fn parse_bool(key: &str, v: Option<&str>, default: bool) -> Result<bool> {
    match v {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(other) => Err(Error::config(format!("`{key}`: expected true or false, got `{other}`"))),
    }
}

impl ExperimentConfig {
    /// Read a config file and apply `--key=value` overrides.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = ConfigMap::parse(&text)?;
        for o in overrides {
            map.apply_override(o)?;
        }
        Self::from_map(&map)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&ConfigMap::parse(text)?)
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut r = Reader::new(map);

        let model = match r.get_or("model.kind", "logistic".to_owned())?.as_str() {
            "logistic" => ModelChoice::Logistic,
            "mlp" => ModelChoice::Mlp {
                hidden: r
                    .list("model.hidden")?
                    .ok_or_else(|| Error::config("mlp needs `model.hidden`"))?,
            },
            "quadratic" => ModelChoice::Quadratic {
                dim: r.require("quadratic.dim")?,
                curvature: r.get_or("quadratic.curvature", 1.0)?,
                noise_var: r.get_or("quadratic.noise_var", 1.0)?,
                f_star: r.get_or("quadratic.f_star", 0.0)?,
                optimum: r.get_or("quadratic.optimum", 1.0)?,
            },
            other => return Err(Error::config(format!("unknown model.kind `{other}`"))),
        };
        let l2 = r.get_or("model.l2", 0.0)?;
        let loss_scale = r.get_or("model.loss_scale", 1.0)?;

        let is_quadratic = matches!(model, ModelChoice::Quadratic { .. });
        let default_source = if is_quadratic { "none" } else { "blobs" };
        let data = match r.get_or("data.source", default_source.to_owned())?.as_str() {
            "blobs" => DataSource::Blobs {
                classes: r.get_or("data.classes", 2)?,
                dim: r.require("data.dim")?,
                count: r.require("data.count")?,
                separation: r.get_or("data.separation", 2.0)?,
            },
            "identical" => DataSource::Identical {
                dim: r.require("data.dim")?,
                count: r.require("data.count")?,
                classes: r.get_or("data.classes", 2)?,
            },
            "idx" => {
                let images: PathBuf = r.require("data.images")?;
                let labels: PathBuf = r.require("data.labels")?;
                let test = match (r.get::<PathBuf>("data.test_images")?, r.get::<PathBuf>("data.test_labels")?) {
                    (Some(i), Some(l)) => Some((i, l)),
                    (None, None) => None,
                    _ => {
                        return Err(Error::config(
                            "set both or neither of `data.test_images` and `data.test_labels`",
                        ))
                    }
                };
                DataSource::Idx { images, labels, test }
            }
            "none" => DataSource::None,
            other => return Err(Error::config(format!("unknown data.source `{other}`"))),
        };
        if is_quadratic != matches!(data, DataSource::None) {
            return Err(Error::config(
                "the quadratic model takes `data.source = none` and every other model needs data",
            ));
        }
        if is_quadratic && (loss_scale != 1.0 || l2 != 0.0) {
            return Err(Error::config("the quadratic model does not take model.l2 or model.loss_scale"));
        }

        let seed = r.get_or("train.seed", 0u64)?;
        let data_seed = r.get_or("data.seed", seed)?;
        let test_fraction = r.get_or("data.test_fraction", 0.2)?;
        let standardize = parse_bool("data.standardize", r.raw("data.standardize"), false)?;
        let sampling = match r.get_or("data.sampling", "without-replacement".to_owned())?.as_str() {
            "without-replacement" => SamplingMode::WithoutReplacement,
            "with-replacement" => SamplingMode::WithReplacement,
            other => return Err(Error::config(format!("unknown data.sampling `{other}`"))),
        };

        let learning_rates = match (
            r.get::<f64>("train.learning_rate")?,
            r.f64_list_or_default("train.learning_rates", &DEFAULT_LEARNING_RATES)?,
        ) {
            (Some(a), None) => LearningRates::Single(a),
            (None, Some(grid)) if !grid.is_empty() => LearningRates::Grid(grid),
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "set exactly one of `train.learning_rate` and `train.learning_rates`",
                ))
            }
            _ => return Err(Error::config("missing `train.learning_rate` or `train.learning_rates`")),
        };
        let thetas = r.f64_list_or_default("train.thetas", &DEFAULT_THETAS)?;

        let min_batch = r.get_or("policy.min_batch", DEFAULT_MIN_BATCH)?;
        let max_batch = r.get_or("policy.max_batch", DEFAULT_MAX_BATCH)?;
        let kind = match r.get_or("policy.kind", "cabs".to_owned())?.as_str() {
            "cabs" => PolicyKind::Cabs,
            "cabs-with-fstar" => PolicyKind::CabsWithFStar {
                f_star: r.get_or("policy.f_star", 0.0)?,
            },
            "constant" => PolicyKind::Constant {
                batch_size: r.require("policy.batch_size")?,
            },
            "geometric" => PolicyKind::Geometric {
                initial: r.get_or("policy.initial", min_batch)?,
                growth: r.require("policy.growth")?,
            },
            "noisy-grad-norm" => {
                let theta = r.get::<f64>("policy.theta")?;
                match (theta, &thetas) {
                    (Some(_), Some(_)) => {
                        return Err(Error::config("set exactly one of `policy.theta` and `train.thetas`"))
                    }
                    (None, None) => return Err(Error::config("noisy-grad-norm needs `policy.theta` or `train.thetas`")),
                    (t, grid) => PolicyKind::NoisyGradNorm {
                        theta: t.unwrap_or_else(|| grid.as_ref().expect("theta grid")[0]),
                    },
                }
            }
            "lipschitz-oracle" => {
                let default_l = match model {
                    ModelChoice::Quadratic { curvature, .. } => Some(curvature),
                    _ => None,
                };
                let lipschitz = match r.get::<f64>("policy.lipschitz")? {
                    Some(l) => l,
                    None => default_l.ok_or_else(|| Error::config("lipschitz-oracle needs `policy.lipschitz`"))?,
                };
                if !is_quadratic {
                    return Err(Error::config(
                        "lipschitz-oracle needs exact gradient statistics and only runs on the quadratic model",
                    ));
                }
                PolicyKind::LipschitzOracle { lipschitz }
            }
            other => return Err(Error::config(format!("unknown policy.kind `{other}`"))),
        };
        if thetas.is_some() && !matches!(kind, PolicyKind::NoisyGradNorm { .. }) {
            return Err(Error::config("`train.thetas` only applies to policy.kind = noisy-grad-norm"));
        }
        let policy = match kind {
            PolicyKind::Constant { batch_size }
                if r.map.get("policy.min_batch").is_none() && r.map.get("policy.max_batch").is_none() =>
            {
                BatchSizePolicy::constant(batch_size)
            }
            _ => BatchSizePolicy::new(kind).with_bounds(min_batch, max_batch),
        };

        let stopping = match (r.get::<u64>("train.steps")?, r.get::<u64>("train.budget")?) {
            (Some(k), None) if k >= 1 => Stopping::Steps(k),
            (None, Some(b)) if b >= 1 => Stopping::Budget(b),
            (Some(_), Some(_)) => return Err(Error::config("set exactly one of `train.steps` and `train.budget`")),
            (None, None) => return Err(Error::config("missing `train.steps` or `train.budget`")),
            _ => return Err(Error::config("`train.steps` and `train.budget` must be >= 1")),
        };
        let eval_interval = r.get::<u64>("train.eval_interval")?;
        if eval_interval == Some(0) {
            return Err(Error::config("`train.eval_interval` must be >= 1"));
        }
        let ema_decay = r.get_or("train.ema", DEFAULT_EMA_DECAY)?;
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::config(format!("`train.ema` must lie in [0, 1), got {ema_decay}")));
        }
        let bessel_correction = parse_bool("train.bessel_correction", r.raw("train.bessel_correction"), false)?;

        let output_dir = match r.get::<PathBuf>("output.dir")? {
            Some(d) => d,
            None => std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
        };
        let name = r.get_or("output.name", "run".to_owned())?;
        r.finish()?;

        let cfg = Self {
            model,
            l2,
            loss_scale,
            data,
            data_seed,
            test_fraction,
            standardize,
            sampling,
            policy,
            learning_rates,
            thetas,
            stopping,
            eval_interval,
            ema_decay,
            bessel_correction,
            seed,
            output_dir,
            name,
        };
        for (lr, policy) in cfg.grid_points() {
            policy.validate(lr).map_err(|e| match e {
                Error::InfeasibleStep(v) => Error::config(format!("L * alpha = {v} must be below 2")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Every `(learning rate, policy)` pair the config describes.
    pub fn grid_points(&self) -> Vec<(f64, BatchSizePolicy)> {
        let lrs = match &self.learning_rates {
            LearningRates::Single(a) => vec![*a],
            LearningRates::Grid(g) => g.clone(),
        };
        let policies: Vec<BatchSizePolicy> = match (&self.thetas, self.policy.kind) {
            (Some(thetas), PolicyKind::NoisyGradNorm { .. }) => thetas
                .iter()
                .map(|&theta| BatchSizePolicy {
                    kind: PolicyKind::NoisyGradNorm { theta },
                    ..self.policy
                })
                .collect(),
            _ => vec![self.policy],
        };
        lrs.iter()
            .flat_map(|&lr| policies.iter().map(move |&p| (lr, p)))
            .collect()
    }

    pub fn is_grid(&self) -> bool {
        self.grid_points().len() > 1 || matches!(self.learning_rates, LearningRates::Grid(_))
    }

    /// Default CSV path of a single run.
    pub fn output_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.csv", self.name))
    }

    /// Load or generate the data and build the model.
    pub fn build_problem(&self) -> Result<Problem> {
        if let ModelChoice::Quadratic {
            dim,
            curvature,
            noise_var,
            f_star,
            optimum,
        } = self.model
        {
            let oracle = QuadraticOracle::scalar(curvature, vec![optimum; dim], f_star, vec![noise_var; dim])?;
            return Ok(Problem {
                model: ModelSpec::quadratic(oracle),
                train: None,
                test: None,
            });
        }
        let (mut train, mut test) = match &self.data {
            DataSource::Blobs {
                classes,
                dim,
                count,
                separation,
            } => generate_gaussian_blobs(*classes, *dim, *count, *separation, self.data_seed)?
                .split(self.test_fraction, self.data_seed)?,
            DataSource::Identical { dim, count, classes } => {
                Dataset::identical(*dim, *count, *classes, self.data_seed)?.split(self.test_fraction, self.data_seed)?
            }
            DataSource::Idx { images, labels, test } => {
                let all = load_idx(images, labels)?;
                match test {
                    Some((ti, tl)) => (all, load_idx(ti, tl)?),
                    None => all.split(self.test_fraction, self.data_seed)?,
                }
            }
            DataSource::None => unreachable!("checked when parsing"),
        };
        let classes = train.num_classes.max(test.num_classes);
        train.num_classes = classes;
        test.num_classes = classes;
        if self.standardize {
            let (mean, std) = train.standardize();
            test.apply_standardization(&mean, &std);
        }
        if test.dim() != train.dim() {
            return Err(Error::config(format!(
                "train examples have {} features but test examples have {}",
                train.dim(),
                test.dim()
            )));
        }
        let largest = match self.policy.kind {
            PolicyKind::Constant { batch_size } => batch_size,
            _ => self.policy.max_batch,
        };
        if self.sampling == SamplingMode::WithoutReplacement && largest > train.len() {
            return Err(Error::config(format!(
                "batch size up to {largest} exceeds the {} training examples; lower policy.max_batch or sample with replacement",
                train.len()
            )));
        }
        let model = match &self.model {
            ModelChoice::Logistic => ModelSpec::logistic_regression(train.dim(), classes),
            ModelChoice::Mlp { hidden } => {
                let mut widths = vec![train.dim()];
                widths.extend_from_slice(hidden);
                widths.push(classes);
                ModelSpec::mlp(widths)
            }
            ModelChoice::Quadratic { .. } => unreachable!(),
        }
        .with_l2(self.l2)
        .with_loss_scale(self.loss_scale);
        model.validate()?;
        Ok(Problem {
            model,
            train: Some(train),
            test: Some(test),
        })
    }
}

/// A built model with its training and test data (absent for the quadratic).
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ModelSpec,
    pub train: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl Problem {
    /// Full-train-set unregularized loss and full-test-set accuracy.
    pub fn score(&self, params: &[f64]) -> Result<(f64, f64)> {
        match (&self.train, &self.test) {
            (Some(train), Some(test)) => {
                let (loss, _) = self.model.score(params, train)?;
                let (_, accuracy) = self.model.score(params, test)?;
                Ok((loss, accuracy))
            }
            _ => {
                let empty = Dataset::identical(1, 1, 1, 0)?;
                self.model.score(params, &empty)
            }
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub examples_accessed: u64,
    /// Batch size of the step just taken; the initial row holds the first batch size.
    pub batch_size: usize,
    pub train_loss: f64,
    /// NaN when the model does not classify.
    pub test_accuracy: f64,
    pub trace_sigma_est: f64,
    pub f_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub final_test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub final_train_loss: f64,
    pub steps: u64,
    pub examples_accessed: u64,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.summary.failure.is_some()
    }
}

fn metrics(state: &OptimizerState, batch_size: usize, score: (f64, f64)) -> MetricsRecord {
    MetricsRecord {
        step: state.step,
        examples_accessed: state.examples_accessed,
        batch_size,
        train_loss: score.0,
        test_accuracy: score.1,
        trace_sigma_est: state.stats.xi,
        f_avg: state.stats.f_avg,
    }
}

/// Train one configuration point to completion or failure.
pub fn run_point(
    cfg: &ExperimentConfig,
    problem: &Problem,
    learning_rate: f64,
    policy: BatchSizePolicy,
) -> Result<RunOutcome> {
    let train_cfg = TrainConfig {
        learning_rate,
        ema_decay: cfg.ema_decay,
        bessel_correction: cfg.bessel_correction,
    };
    let params = problem.model.init_params(&mut seeded_stream(cfg.seed, 0));
    let mut objective: Box<dyn Objective + '_> = match (&problem.model.kind, &problem.train) {
        (ModelKind::Quadratic(oracle), _) => Box::new(NoisyQuadratic::new(oracle.clone(), seeded_stream(cfg.seed, 1))),
        (_, Some(train)) => {
            let sampler = Sampler::from_rng(cfg.sampling, train.len(), seeded_stream(cfg.seed, 1));
            Box::new(SampledObjective::new(&problem.model, train, sampler)?)
        }
        (_, None) => return Err(Error::contract("a data-driven model needs training data")),
    };
    let mut trainer = Trainer::new(policy, train_cfg, params)?;

    let steps_interval = match (cfg.stopping, cfg.eval_interval) {
        (_, Some(_)) | (Stopping::Budget(_), None) => None,
        (Stopping::Steps(k), None) => Some(k.div_ceil(20)),
    };
    let examples_interval = match (cfg.stopping, cfg.eval_interval) {
        (_, Some(i)) => Some(i),
        (Stopping::Budget(b), None) => Some(b.div_ceil(20)),
        (Stopping::Steps(_), None) => None,
    };

    let mut records = vec![metrics(
        trainer.state(),
        trainer.state().batch_size,
        problem.score(&trainer.state().params)?,
    )];
    let mut failure = None;
    let mut last_batch = trainer.state().batch_size;
    loop {
        let st = trainer.state();
        let done = match cfg.stopping {
            Stopping::Steps(k) => st.step >= k,
            Stopping::Budget(b) => st.examples_accessed >= b,
        };
        if done {
            break;
        }
        let before = st.examples_accessed;
        let rec = match trainer.step(objective.as_mut()) {
            Ok(rec) => rec,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        last_batch = rec.batch_size;
        let due = match (examples_interval, steps_interval) {
            (Some(i), _) => rec.examples_accessed / i > before / i,
            (None, Some(k)) => rec.step % k == 0,
            (None, None) => false,
        };
        if due {
            match problem.score(&trainer.state().params) {
                Ok(s) => records.push(metrics(trainer.state(), rec.batch_size, s)),
                Err(e) => {
                    failure = Some(format!("evaluation after step {}: {e}", rec.step));
                    break;
                }
            }
        }
    }
    let st = trainer.state();
    if records.last().map(|r| r.step) != Some(st.step) {
        match problem.score(&st.params) {
            Ok(s) => records.push(metrics(st, last_batch, s)),
            Err(e) => {
                failure.get_or_insert_with(|| format!("final evaluation: {e}"));
            }
        }
    }
    let last = records.last().expect("initial record");
    let best = records
        .iter()
        .map(|r| r.test_accuracy)
        .filter(|a| !a.is_nan())
        .fold(f64::NAN, f64::max);
    let summary = RunSummary {
        final_test_accuracy: last.test_accuracy,
        best_test_accuracy: best,
        final_train_loss: last.train_loss,
        steps: st.step,
        examples_accessed: st.examples_accessed,
        failure,
    };
    Ok(RunOutcome { records, summary })
}

/// Run a config with a single learning rate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let points = cfg.grid_points();
    let [(lr, policy)] = points[..] else {
        return Err(Error::config(format!(
            "config describes {} grid points; use a grid search",
            points.len()
        )));
    };
    let problem = cfg.build_problem()?;
    run_point(cfg, &problem, lr, policy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub theta: Option<f64>,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub points: Vec<GridPoint>,
    /// Index of the selected point.
    pub best: usize,
}

/// Index of the best `(final test accuracy, final train loss, learning rate)` triple:
/// highest accuracy, then lowest loss, then smallest learning rate. `None` entries are
/// failed points. NaN accuracy ranks below every number.
pub fn select_best(candidates: &[Option<(f64, f64, f64)>]) -> Option<usize> {
    let key = |acc: f64| if acc.is_nan() { f64::NEG_INFINITY } else { acc };
    let loss_key = |l: f64| if l.is_nan() { f64::INFINITY } else { l };
    candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .min_by(|(_, a), (_, b)| {
            key(b.0)
                .total_cmp(&key(a.0))
                .then(loss_key(a.1).total_cmp(&loss_key(b.1)))
                .then(a.2.total_cmp(&b.2))
        })
        .map(|(i, _)| i)
}

/// Run every grid point in parallel with the same seed and pick the best one.
pub fn grid_search(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    let points = cfg.grid_points();
    if points.is_empty() {
        return Err(Error::config("empty grid"));
    }
    let problem = cfg.build_problem()?;
    let results: Vec<GridPoint> = points
        .par_iter()
        .map(|&(lr, policy)| {
            let outcome = run_point(cfg, &problem, lr, policy).unwrap_or_else(|e| RunOutcome {
                records: Vec::new(),
                summary: RunSummary {
                    final_test_accuracy: f64::NAN,
                    best_test_accuracy: f64::NAN,
                    final_train_loss: f64::NAN,
                    steps: 0,
                    examples_accessed: 0,
                    failure: Some(e.to_string()),
                },
            });
            let theta = match policy.kind {
                PolicyKind::NoisyGradNorm { theta } => Some(theta),
                _ => None,
            };
            GridPoint {
                learning_rate: lr,
                theta,
                outcome,
            }
        })
        .collect();
    let candidates: Vec<_> = results
        .iter()
        .map(|p| {
            (!p.outcome.failed()).then_some((
                p.outcome.summary.final_test_accuracy,
                p.outcome.summary.final_train_loss,
                p.learning_rate,
            ))
        })
        .collect();
    let best = select_best(&candidates).ok_or(Error::AllGridPointsFailed(results.len()))?;
    Ok(GridOutcome { points: results, best })
}

impl GridPoint {
    pub fn file_name(&self, name: &str) -> String {
        match self.theta {
            Some(t) => format!("{name}_lr{}_theta{}.csv", format_float(self.learning_rate), format_float(t)),
            None => format!("{name}_lr{}.csv", format_float(self.learning_rate)),
        }
    }
}

impl GridOutcome {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }

    /// Write one metrics CSV per point plus `<name>_grid.csv`; returns the summary path.
    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let mut summary = format!("{GRID_HEADER}\n");
        for p in &self.points {
            emit_csv(&p.outcome.records, dir.join(p.file_name(name)))?;
            let s = &p.outcome.summary;
            let row = [
                format_float(p.learning_rate),
                p.theta.map(format_float).unwrap_or_default(),
                if p.outcome.failed() { "failed" } else { "ok" }.to_owned(),
                format_float(s.final_test_accuracy),
                format_float(s.best_test_accuracy),
                format_float(s.final_train_loss),
                s.steps.to_string(),
                s.examples_accessed.to_string(),
                s.failure.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ];
            summary.push_str(&row.join(","));
            summary.push('\n');
        }
        let path = dir.join(format!("{name}_grid.csv"));
        write_file(&path, &summary)?;
        Ok(path)
    }
}

/// `%.12g`: 12 significant digits, trailing zeros dropped, exponent form outside
/// `[1e-4, 1e12)`.
pub fn format_float(x: f64) -> String {
    const DIGITS: i32 = 12;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s.to_owned()
        }
    };
    if !(-4..DIGITS).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{:.*}", (DIGITS - 1 - exp) as usize, x))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn csv_string(records: &[MetricsRecord]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.examples_accessed,
            r.batch_size,
            format_float(r.train_loss),
            format_float(r.test_accuracy),
            format_float(r.trace_sigma_est),
            format_float(r.f_avg),
        ));
    }
    out
}

pub fn emit_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &csv_string(records))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::config("metrics CSV has an unexpected header"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::config(format!("metrics CSV line {}: cannot parse `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRecord {
                step: f[0].parse().map_err(|_| bad())?,
                examples_accessed: f[1].parse().map_err(|_| bad())?,
                batch_size: f[2].parse().map_err(|_| bad())?,
                train_loss: float(f[3])?,
                test_accuracy: float(f[4])?,
                trace_sigma_est: float(f[5])?,
                f_avg: float(f[6])?,
            })
        })
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Noisy 8x8 images of a horizontal (label 0) or vertical (label 1) bar.
fn bars(count: usize, seed: u64) -> (IdxTensor, IdxTensor) {
    let mut rng = seeded_stream(seed, 0);
    let mut pixels = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 2) as u8;
        let line = rng.random_range(0..8usize);
        for r in 0..8 {
            for c in 0..8 {
                let on = if label == 0 { r == line } else { c == line };
                pixels.push(if on { rng.random_range(180..=255u8) } else { rng.random_range(0..=60u8) });
            }
        }
        labels.push(label);
    }
    (
        IdxTensor {
            dims: vec![count, 8, 8],
            data: pixels,
        },
        IdxTensor {
            dims: vec![count],
            data: labels,
        },
    )
}

/// Write the IDX fixture set into `dir` and return the paths written:
/// a two-image 28x28 pair, a bar-orientation train/test set, and two malformed files.
pub fn emit_fixtures(dir: &Path) -> Result<Vec<PathBuf>> {
    let tiny_images = IdxTensor {
        dims: vec![2, 28, 28],
        data: (0..2 * 784).map(|i| (i % 256) as u8).collect(),
    };
    let tiny_labels = IdxTensor {
        dims: vec![2],
        data: vec![3, 7],
    };
    let mismatch_labels = IdxTensor {
        dims: vec![3],
        data: vec![1, 2, 3],
    };
    let mut truncated = tiny_images.to_bytes();
    truncated.truncate(truncated.len() - 10);
    let (train_images, train_labels) = bars(400, 1);
    let (test_images, test_labels) = bars(100, 2);
    let files = [
        ("tiny-images.idx", tiny_images.to_bytes()),
        ("tiny-labels.idx", tiny_labels.to_bytes()),
        ("mismatch-labels.idx", mismatch_labels.to_bytes()),
        ("truncated-images.idx", truncated),
        ("bars-train-images.idx", train_images.to_bytes()),
        ("bars-train-labels.idx", train_labels.to_bytes()),
        ("bars-test-images.idx", test_images.to_bytes()),
        ("bars-test-labels.idx", test_labels.to_bytes()),
    ];
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    files
        .into_iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
