//! Datasets, mini-batch samplers and synthetic generators.

mod idx;

pub use idx::{load_idx, read_idx, write_idx, IdxError, IdxTensor, LABEL_MAGIC};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::Rng;

/// How the features were preprocessed.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// Bytes divided by 255.
    UnitInterval,
    /// Per-feature `(x - mean) / std`, statistics computed on this dataset.
    Standardized { mean: Vec<f64>, std: Vec<f64> },
}

/// Labelled examples, one row of `features` per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-example shape before flattening (e.g. `[28, 28]`); `[dim]` for flat data.
    pub example_shape: Vec<usize>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let dim = features.ncols();
        let ds = Self {
            name: name.into(),
            features,
            labels,
            num_classes,
            example_shape: vec![dim],
            normalization: Normalization::None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::contract("dataset must contain at least one example"));
        }
        if self.features.nrows() != self.labels.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::contract(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("dataset features must be finite"));
        }
        if self.example_shape.iter().product::<usize>() != self.features.ncols() {
            return Err(Error::contract(format!(
                "example shape {:?} does not match feature dimension {}",
                self.example_shape,
                self.features.ncols()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// `count` copies of one example: every per-example gradient is identical.
    pub fn identical(dim: usize, count: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let features = Array2::from_shape_fn((count, dim), |(_, j)| row[j]);
        Self::new("identical", features, vec![0; count], num_classes)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            example_shape: self.example_shape.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Seeded permutation split into `(train, test)`; `test_fraction` of the examples
    /// (rounded down, at least one on each side) go to the test set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) || self.len() < 2 {
            return Err(Error::contract(format!(
                "cannot split {} examples with test fraction {test_fraction}",
                self.len()
            )));
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64 * test_fraction) as usize).clamp(1, self.len() - 1);
        let (test, train) = perm.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Standardize every feature in place and return the statistics used.
    /// Constant features are left centered with unit divisor.
    pub fn standardize(&mut self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.features.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std: Vec<f64> = self
            .features
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 0.0 { s } else { 1.0 })
            .collect();
        self.apply_standardization(&mean, &std);
        (mean, std)
    }

    /// Apply statistics computed elsewhere (e.g. on the training split).
    pub fn apply_standardization(&mut self, mean: &[f64], std: &[f64]) {
        for mut row in self.features.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(mean).zip(std) {
                *x = (*x - m) / s;
            }
        }
        self.normalization = Normalization::Standardized {
            mean: mean.to_vec(),
            std: std.to_vec(),
        };
    }
}

/// `classes` Gaussian blobs in `dim` dimensions, `count / classes` examples each.
///
/// Class `c` is centered at `separation * e_c` (the `c`-th unit vector) with unit
/// isotropic noise. Labels cycle `0, 1, .., classes - 1`.
pub fn generate_gaussian_blobs(
    classes: usize,
    dim: usize,
    count: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {classes}")));
    }
    if dim < classes {
        return Err(Error::contract(format!(
            "blob centers need dim >= classes ({dim} < {classes})"
        )));
    }
    if count == 0 || !count.is_multiple_of(classes) {
        return Err(Error::contract(format!(
            "example count {count} must be a positive multiple of {classes}"
        )));
    }
    if !separation.is_finite() {
        return Err(Error::contract("separation must be finite"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let mut features = Array2::<f64>::zeros((count, dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        for x in row.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        row[labels[i]] += separation;
    }
    let mut ds = Dataset::new(
        format!("blobs-c{classes}-d{dim}-s{separation}"),
        features,
        labels,
        classes,
    )?;
    ds.example_shape = vec![dim];
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    WithReplacement,
    WithoutReplacement,
}

/// Draws mini-batch indices. Owned by exactly one training run.
#[derive(Debug, Clone)]
pub struct Sampler {
    mode: SamplingMode,
    len: usize,
    perm: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Sampler {
    pub fn new(mode: SamplingMode, dataset_len: usize, seed: u64) -> Self {
        Self::from_rng(mode, dataset_len, Rng::seed_from_u64(seed))
    }

    pub fn from_rng(mode: SamplingMode, dataset_len: usize, rng: Rng) -> Self {
        let mut s = Self {
            mode,
            len: dataset_len,
            perm: (0..dataset_len).collect(),
            cursor: dataset_len,
            rng,
        };
        if mode == SamplingMode::WithoutReplacement {
            s.reshuffle();
        }
        s
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    fn reshuffle(&mut self) {
        self.perm.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next `m` indices.
    ///
    /// Without replacement, batches are consecutive slices of an epoch permutation. When
    /// fewer than `m` examples remain in the epoch the permutation is reshuffled and the
    /// leftovers are skipped, so a batch never straddles two epochs.
    pub fn sample_batch(&mut self, m: usize) -> Result<Vec<usize>> {
        if m == 0 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        match self.mode {
            SamplingMode::WithReplacement => {
                let len = self.len;
                Ok((0..m).map(|_| self.rng.random_range(0..len)).collect())
            }
            SamplingMode::WithoutReplacement => {
                if m > self.len {
                    return Err(Error::contract(format!(
                        "batch size {m} exceeds dataset size {} without replacement",
                        self.len
                    )));
                }
                if self.cursor + m > self.len {
                    self.reshuffle();
                }
                let batch = self.perm[self.cursor..self.cursor + m].to_vec();
                self.cursor += m;
                Ok(batch)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_permutation() {
        let mut s = Sampler::new(SamplingMode::WithoutReplacement, 37, 3);
        let mut b = s.sample_batch(37).unwrap();
        b.sort_unstable();
        assert_eq!(b, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_every_index_once() {
        let mut s = Sampler::new(SamplingMode::WithoutReplacement, 60, 9);
        for _epoch in 0..3 {
            let mut seen = vec![0u32; 60];
            for _ in 0..5 {
                for i in s.sample_batch(12).unwrap() {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn reshuffles_instead_of_truncating() {
        let mut s = Sampler::new(SamplingMode::WithoutReplacement, 10, 1);
        s.sample_batch(7).unwrap();
        let b = s.sample_batch(7).unwrap();
        assert_eq!(b.len(), 7);
        let mut u = b.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 7);
    }

    #[test]
    fn oversized_batch_without_replacement() {
        let mut s = Sampler::new(SamplingMode::WithoutReplacement, 5, 1);
        assert!(matches!(s.sample_batch(6), Err(Error::Contract(_))));
        let mut r = Sampler::new(SamplingMode::WithReplacement, 5, 1);
        assert_eq!(r.sample_batch(6).unwrap().len(), 6);
    }

    #[test]
    fn sampler_is_deterministic() {
        for mode in [SamplingMode::WithReplacement, SamplingMode::WithoutReplacement] {
            let mut a = Sampler::new(mode, 100, 42);
            let mut b = Sampler::new(mode, 100, 42);
            for m in [3, 17, 40, 99] {
                assert_eq!(a.sample_batch(m).unwrap(), b.sample_batch(m).unwrap());
            }
        }
    }

    #[test]
    fn with_replacement_is_uniform() {
        let mut s = Sampler::new(SamplingMode::WithReplacement, 2, 5);
        let draws = s.sample_batch(100_000).unwrap();
        let ones = draws.iter().filter(|&&i| i == 1).count() as f64 / 1e5;
        assert!((ones - 0.5).abs() / 0.5 < 0.02, "frequency {ones}");
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = generate_gaussian_blobs(3, 5, 300, 2.0, 11).unwrap();
        let b = generate_gaussian_blobs(3, 5, 300, 2.0, 11).unwrap();
        assert_eq!(a.features, b.features);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 100);
        }
        let other = generate_gaussian_blobs(3, 5, 300, 2.0, 12).unwrap();
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn blob_centers_follow_separation() {
        let ds = generate_gaussian_blobs(2, 4, 20_000, 5.0, 2).unwrap();
        for c in 0..2 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
            let sub = ds.subset(&rows);
            let mean = sub.features.mean_axis(Axis(0)).unwrap();
            for j in 0..4 {
                let want = if j == c { 5.0 } else { 0.0 };
                assert!((mean[j] - want).abs() < 0.05, "class {c} coord {j}: {}", mean[j]);
            }
        }
    }

    #[test]
    fn blob_validation() {
        assert!(generate_gaussian_blobs(1, 4, 10, 1.0, 0).is_err());
        assert!(generate_gaussian_blobs(3, 2, 9, 1.0, 0).is_err());
        assert!(generate_gaussian_blobs(3, 4, 10, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let ds = generate_gaussian_blobs(2, 2, 100, 1.0, 0).unwrap();
        let (tr, te) = ds.split(0.2, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        let (tr2, te2) = ds.split(0.2, 4).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
    }

    #[test]
    fn standardize_centers_features() {
        let mut ds = generate_gaussian_blobs(2, 3, 1000, 4.0, 0).unwrap();
        ds.standardize();
        let mean = ds.features.mean_axis(Axis(0)).unwrap();
        let std = ds.features.std_axis(Axis(0), 0.0);
        for j in 0..3 {
            assert!(mean[j].abs() < 1e-12);
            assert!((std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_validation() {
        let f = Array2::zeros((2, 3));
        assert!(Dataset::new("x", f.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new("x", f.clone(), vec![0], 2).is_err());
        assert!(Dataset::new("x", Array2::zeros((0, 3)), vec![], 2).is_err());
        let mut bad = f;
        bad[[0, 0]] = f64::NAN;
        assert!(Dataset::new("x", bad, vec![0, 1], 2).is_err());
    }
}
