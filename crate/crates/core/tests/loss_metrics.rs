mod common;

use common::*;
use dam_core::layers::{logistic_loss, softmax};
use dam_core::{ConfusionMatrix, FeatureMap, LabelMap, LossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), c in 1usize..6, scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_map(&mut rng, c, 3, 4).map(|v| v * scale);
        let p = softmax(&x);
        for m in 0..3 {
            for n in 0..4 {
                let sum: f64 = (0..c).map(|r| p.get(r, m, n)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!((0..c).all(|r| p.get(r, m, n) >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_ignores_shared_offsets(seed in any::<u64>(), shift in -500.0f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_map(&mut rng, 4, 2, 2);
        let a = softmax(&x);
        let b = softmax(&x.map(|v| v + shift));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn merged_matrices_equal_joint_accumulation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(2..5);
        let make = |rng: &mut ChaCha8Rng| {
            LabelMap::new(3, 5, (0..15).map(|_| rng.gen_range(0..c)).collect(), None).unwrap()
        };
        let (p1, t1, p2, t2) = (make(&mut rng), make(&mut rng), make(&mut rng), make(&mut rng));
        let mut a = ConfusionMatrix::new(c);
        a.accumulate(&p1, &t1).unwrap();
        let mut b = ConfusionMatrix::new(c);
        b.accumulate(&p2, &t2).unwrap();
        a.merge(&b).unwrap();
        let mut counts = vec![0u64; c * c];
        for (p, t) in [(&p1, &t1), (&p2, &t2)] {
            for (pp, tt) in p.labels().iter().zip(t.labels()) {
                counts[tt * c + pp] += 1;
            }
        }
        prop_assert_eq!(a, ConfusionMatrix::from_counts(c, counts).unwrap());
    }
}

#[test]
fn loss_gradient_matches_finite_differences_through_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for normalize in [true, false] {
        let cfg = LossConfig {
            normalize,
            lambda: 0.0,
            ignore_label: Some(9),
        };
        let x = random_map(&mut rng, 3, 3, 4).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..12)
            .map(|i| if i == 5 { 9 } else { rng.gen_range(0..3) })
            .collect();
        let labels = LabelMap::new(3, 4, labels, None).unwrap();
        let (_, grad) = logistic_loss(&softmax(&x), &labels, &cfg).unwrap();
        for k in 0..x.values().len() {
            let mut xp = x.clone();
            let numeric = central_difference(
                |v| {
                    xp.values_mut()[k] = v;
                    logistic_loss(&softmax(&xp), &labels, &cfg).unwrap().0
                },
                x.values()[k],
                1e-5,
            );
            assert!(rel_err(grad.values()[k], numeric) < 1e-6, "k {k}");
        }
        // the ignored pixel (row 1, col 1) passes no gradient
        assert!((0..3).all(|r| grad.get(r, 1, 1) == 0.0));
    }
}

#[test]
fn normalized_loss_is_mean_negative_log_likelihood() {
    let x = FeatureMap::from_vec(2, 1, 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap();
    let labels = LabelMap::new(1, 2, vec![0, 1], None).unwrap();
    let p = softmax(&x);
    let expected = -(p.get(0, 0, 0).ln() + p.get(1, 0, 1).ln()) / 2.0;
    let (loss, _) = logistic_loss(&p, &labels, &LossConfig::default()).unwrap();
    assert!((loss - expected).abs() < 1e-15);
}

fn random_counts(rng: &mut ChaCha8Rng, c: usize) -> Vec<u64> {
    (0..c * c)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0
            } else {
                rng.gen_range(0..500)
            }
        })
        .collect()
}

#[test]
fn metrics_match_term_by_term_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 200 {
        let c = rng.gen_range(2..7);
        let counts = random_counts(&mut rng, c);
        if counts.iter().sum::<u64>() == 0 {
            continue;
        }
        let m = ConfusionMatrix::from_counts(c, counts.clone())
            .unwrap()
            .compute_all()
            .unwrap();
        let b = brute_metrics(&counts, c);
        assert!((m.pixel_accuracy - b.pixel_accuracy).abs() < 1e-12);
        assert!((m.mean_accuracy - b.mean_accuracy).abs() < 1e-12);
        assert!((m.mean_iou - b.mean_iou).abs() < 1e-12);
        assert!((m.fw_iou - b.fw_iou).abs() < 1e-12);
        match m.binary {
            Some(bin) => {
                assert!((bin.precision - b.precision.unwrap()).abs() < 1e-12);
                assert!((bin.recall - b.recall.unwrap()).abs() < 1e-12);
                assert!((bin.f1 - b.f1.unwrap()).abs() < 1e-12);
            }
            None => assert!(b.precision.is_none()),
        }
        checked += 1;
    }
}

#[test]
fn empty_matrix_is_an_error() {
    assert!(ConfusionMatrix::new(3).compute_all().is_err());
}
