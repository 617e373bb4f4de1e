mod common;

use common::{oracle, random_dump};
use perspective_core::calibrate::{tune_thresholds, ThresholdMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn per_class_tuner_matches_brute_force_on_20_dumps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let items = random_dump(&mut rng);
        let got = tune_thresholds(&items, ThresholdMode::PerClass, 0.05).unwrap();
        let (tau, best, evaluated) = oracle(&items, ThresholdMode::PerClass);
        assert_eq!(evaluated, 17 * 17 * 17);
        assert_eq!(got.evaluated, evaluated);
        assert_eq!(got.config.tau, tau);
        assert!((got.mean_jaccard - best).abs() < 1e-12);
    }
}

#[test]
fn global_tuner_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let items = random_dump(&mut rng);
        let got = tune_thresholds(&items, ThresholdMode::Global, 0.05).unwrap();
        let (tau, best, evaluated) = oracle(&items, ThresholdMode::Global);
        assert_eq!(got.evaluated, evaluated);
        assert_eq!(got.config.tau, tau);
        assert!((got.mean_jaccard - best).abs() < 1e-12);
    }
}
