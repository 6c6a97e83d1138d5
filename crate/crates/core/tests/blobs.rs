use cabs::data::generate_gaussian_blobs;
use cabs::optimizer::run_training_on;
use cabs::{BatchSizePolicy, ModelSpec, SamplingMode, TrainConfig};

fn train_accuracy(classes: usize, dim: usize, separation: f64, seed: u64) -> (f64, f64) {
    let data = generate_gaussian_blobs(classes, dim, 4000 * classes, separation, seed).unwrap();
    let (train, test) = data.split(0.2, seed).unwrap();
    let model = ModelSpec::logistic_regression(dim, classes);
    let (_, state) = run_training_on(
        &model,
        &train,
        BatchSizePolicy::constant(32),
        TrainConfig::new(0.1),
        1500,
        SamplingMode::WithoutReplacement,
        seed,
    )
    .unwrap();
    let (_, train_acc) = model.score(&state.params, &train).unwrap();
    let (_, test_acc) = model.score(&state.params, &test).unwrap();
    (train_acc, test_acc)
}

#[test]
fn zero_separation_is_chance() {
    for classes in [2, 4] {
        let (_, test_acc) = train_accuracy(classes, 5, 0.0, 17);
        let chance = 1.0 / classes as f64;
        assert!((test_acc - chance).abs() <= 0.03, "C={classes}: {test_acc}");
    }
}

#[test]
fn wide_separation_is_learned() {
    let (train_acc, _) = train_accuracy(2, 2, 10.0, 5);
    assert!(train_acc > 0.99, "{train_acc}");
}

#[test]
fn same_seed_same_features() {
    let a = generate_gaussian_blobs(3, 4, 30, 1.0, 9).unwrap();
    let b = generate_gaussian_blobs(3, 4, 30, 1.0, 9).unwrap();
    assert_eq!(a.features, b.features);
    assert!(generate_gaussian_blobs(3, 4, 31, 1.0, 9).is_err());
}
