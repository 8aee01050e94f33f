use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hssl::dataset::{Mask, Split};
use hssl::eval::{dice, probe_features, DiceReport, ProbeLevel};

fn mask(labels: Vec<u8>) -> Mask {
    let n = (labels.len() as f64).sqrt() as usize;
    Mask::new(n, n, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u8..3, 64), b in prop::collection::vec(0u8..3, 64), c in 0u8..3) {
        let (a, b) = (mask(a), mask(b));
        let ab = dice(&a, &b, c).unwrap();
        prop_assert_eq!(ab, dice(&b, &a, c).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a, c).unwrap(), 1.0);
    }

    #[test]
    fn dice_report_ignores_image_order(
        preds in prop::collection::vec(prop::collection::vec(0u8..2, 16), 2..8),
        seed in any::<u64>(),
    ) {
        let gts: Vec<Mask> = preds.iter().map(|p| mask(p.iter().rev().copied().collect())).collect();
        let mut pairs: Vec<(Mask, &Mask)> = preds.iter().map(|p| mask(p.clone())).zip(&gts).collect();
        let a = DiceReport::from_pairs(1, Split::Test, 1, &pairs).unwrap();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = DiceReport::from_pairs(1, Split::Test, 1, &pairs).unwrap();
        prop_assert!((a.average - b.average).abs() < 1e-12);
        prop_assert_eq!(a.n_images, preds.len());
    }
}

#[test]
fn dice_examples() {
    let a = mask(vec![1, 1, 0, 0]);
    let b = mask(vec![1, 0, 1, 0]);
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
    assert_eq!(dice(&a, &mask(vec![0, 0, 1, 1]), 1).unwrap(), 0.0);
    // both empty
    assert_eq!(dice(&mask(vec![0; 4]), &mask(vec![0; 4]), 1).unwrap(), 1.0);
    assert!(dice(&a, &mask(vec![0; 9]), 1).is_err());
}

#[test]
fn per_image_average() {
    let gt = [mask(vec![1, 1, 0, 0]), mask(vec![0, 0, 0, 0])];
    let pairs = vec![(mask(vec![1, 0, 0, 0]), &gt[0]), (mask(vec![0, 0, 0, 0]), &gt[1])];
    let r = DiceReport::from_pairs(3, Split::Val, 1, &pairs).unwrap();
    // (2/3 + 1) / 2
    assert!((r.average - 5.0 / 6.0).abs() < 1e-12);
    assert!(r.csv_row().starts_with("3,val,"));
    assert!(DiceReport::from_pairs(3, Split::Val, 1, &[]).is_err());
}

fn labelled_features(n: usize, classes: usize, informative: bool, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = labels
        .iter()
        .map(|&y| {
            let mut f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            if informative {
                f.extend((0..classes).map(|c| f64::from(c == y)));
            }
            f
        })
        .collect();
    (features, labels)
}

#[test]
fn one_hot_features_probe_perfectly() {
    let (x, y) = labelled_features(200, 4, true, 0);
    let r = probe_features(&x, &y, 4, ProbeLevel::Task, 0).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.chance, 0.25);
    assert_eq!((r.n_train, r.n_test), (160, 40));
}

#[test]
fn shuffled_labels_probe_near_chance() {
    let (x, mut y) = labelled_features(1120, 4, true, 1);
    y.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let r = probe_features(&x, &y, 4, ProbeLevel::Task, 0).unwrap();
    assert!((r.accuracy - 0.25).abs() <= 0.1, "{}", r.accuracy);

    let (x, mut y) = labelled_features(1120, 2, false, 3);
    y.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let r = probe_features(&x, &y, 2, ProbeLevel::Group, 0).unwrap();
    assert!((r.accuracy - 0.5).abs() <= 0.1, "{}", r.accuracy);
}
