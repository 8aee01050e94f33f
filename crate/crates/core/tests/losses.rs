use proptest::prelude::*;

use hssl::losses::{
    class_loss, class_loss_batch, image_loss, ntxent_single, rec_loss, softmax, total_loss, ContrastiveBatch, LossSpec,
    LossTerm, LossTerms,
};
use hssl::MatrixF64;

fn batch(rows: &[Vec<f64>]) -> ContrastiveBatch<f64> {
    let d = rows[0].len();
    ContrastiveBatch::new(MatrixF64::from_vec(rows.len(), d, rows.concat())).unwrap()
}

fn embeddings(max_pairs: usize, max_dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_pairs, 2..=max_dim).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2 * n)
            .prop_filter("non-zero rows", |rows| rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3))
    })
}

/// Random rotation of R^d from a product of Givens rotations.
fn rotate(rows: &[Vec<f64>], angles: &[f64]) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    rows.iter()
        .map(|r| {
            let mut v = r.clone();
            for (k, &a) in angles.iter().enumerate() {
                let (i, j) = (k % d, (k + 1) % d);
                if i == j {
                    continue;
                }
                let (c, s) = (a.cos(), a.sin());
                let (x, y) = (v[i], v[j]);
                v[i] = c * x - s * y;
                v[j] = s * x + c * y;
            }
            v
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn image_loss_is_nonnegative_and_scale_invariant(
        rows in embeddings(8, 16),
        scales in prop::collection::vec(0.01f64..100.0, 16),
        tau in 0.05f64..2.0,
    ) {
        let (l, _) = image_loss(&batch(&rows), tau).unwrap();
        prop_assert!(l >= 0.0);
        let scaled: Vec<Vec<f64>> = rows.iter().zip(scales.iter().cycle()).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let (ls, _) = image_loss(&batch(&scaled), tau).unwrap();
        prop_assert!((l - ls).abs() <= 1e-9 * l.max(1.0));
    }

    #[test]
    fn image_loss_is_rotation_invariant(rows in embeddings(8, 12), angles in prop::collection::vec(0.0f64..6.3, 20)) {
        let (l, _) = image_loss(&batch(&rows), 0.5).unwrap();
        let (lr, _) = image_loss(&batch(&rotate(&rows, &angles)), 0.5).unwrap();
        prop_assert!((l - lr).abs() <= 1e-9 * l.max(1.0));
    }

    #[test]
    fn pulling_the_positive_closer_lowers_the_loss(rows in embeddings(6, 8), t in 0.05f64..0.95) {
        prop_assume!(rows.len() >= 4);
        let b = batch(&rows);
        let before = ntxent_single(&b, 0, 0.5).unwrap();
        // move view 1 towards view 0 along the chord; negatives untouched
        let unit = |v: &[f64]| { let n = v.iter().map(|x| x * x).sum::<f64>().sqrt(); v.iter().map(|x| x / n).collect::<Vec<_>>() };
        let (a, p) = (unit(&rows[0]), unit(&rows[1]));
        let cos: f64 = a.iter().zip(&p).map(|(x, y)| x * y).sum();
        prop_assume!(cos < 1.0 - 1e-6);
        let mut moved = rows.clone();
        moved[1] = a.iter().zip(&p).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let after = ntxent_single(&batch(&moved), 0, 0.5).unwrap();
        prop_assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn softmax_sums_to_one_and_ce_is_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 2..12), y in 0usize..12) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let y = y % logits.len();
        let l = class_loss(&logits, y).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        prop_assert!((l + p[y].ln()).abs() < 1e-9 * l.max(1.0));
    }

    #[test]
    fn total_is_the_weighted_sum_of_enabled_terms(
        values in prop::collection::vec(0.0f64..10.0, 4),
        mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        let mut spec = LossSpec::default();
        let mut terms = LossTerms::default();
        let mut expected = 0.0;
        for ((t, v), on) in LossTerm::ALL.into_iter().zip(&values).zip(&mask) {
            spec.set_enabled(t, *on);
            if *on {
                terms.set(t, Some(*v));
                expected += spec.weight(t) * v;
            }
        }
        let total = total_loss(&terms, &spec);
        prop_assert!(total >= 0.0);
        prop_assert!((total - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

#[test]
fn identical_embeddings_give_log_one_plus_negatives() {
    for n in [2usize, 3, 8] {
        let rows = vec![vec![1.0, 2.0, -0.5]; 2 * n];
        let (l, _) = image_loss(&batch(&rows), 0.5).unwrap();
        // averaged over N anchors, both directions summed
        let expected = 2.0 * (1.0 + (2 * n - 2) as f64).ln();
        assert!((l - expected).abs() < 1e-12 * expected, "{l} vs {expected}");
    }
}

#[test]
fn uniform_logits_give_log_classes() {
    for c in [2usize, 4, 8] {
        let l = class_loss(&vec![0.0f64; c], 0).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-15);
    }
    let logits = MatrixF64::from_vec(3, 4, vec![0.0; 12]);
    let (l, grad) = class_loss_batch(&logits, &[0, 1, 3]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    assert_eq!((grad.rows, grad.cols), (3, 4));
    assert!(class_loss(&[0.0f64, 1.0], 2).is_err());
}

#[test]
fn reconstruction_loss_is_mean_squared_error() {
    use hssl::FeatureMapF64;
    let x = FeatureMapF64::from_vec(3, 1, 2, 2, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
    let y = FeatureMapF64::from_vec(3, 1, 2, 2, x.data.iter().map(|v| v + 0.3).collect()).unwrap();
    assert!((rec_loss(&y, &x).unwrap() - 0.09).abs() < 1e-12);
    assert_eq!(rec_loss(&x, &x).unwrap(), 0.0);
    let small = FeatureMapF64::from_vec(3, 1, 1, 1, vec![0.0; 3]).unwrap();
    assert!(rec_loss(&small, &x).is_err());
}

#[test]
fn contrastive_batch_needs_an_even_number_of_rows() {
    assert!(ContrastiveBatch::new(MatrixF64::from_vec(3, 2, vec![1.0; 6])).is_err());
    assert!(ContrastiveBatch::new(MatrixF64::from_vec(4, 2, vec![1.0; 8])).is_ok());
}

#[test]
fn loss_spec_rejects_bad_settings() {
    assert!(LossSpec::default().validate().is_ok());
    assert!(LossSpec { temperature: 0.0, ..LossSpec::default() }.validate().is_err());
    assert!(LossSpec { lambda_rec: -1.0, ..LossSpec::default() }.validate().is_err());
    let mut none = LossSpec::default();
    for t in LossTerm::ALL {
        none.set_enabled(t, false);
    }
    assert!(none.validate().is_err());
    let only = LossSpec::only(LossTerm::Group);
    assert!(LossTerm::ALL.iter().all(|&t| only.enabled(t) == (t == LossTerm::Group)));
}
