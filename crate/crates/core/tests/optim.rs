mod common;

use common::sgd_replay;
use dam_core::{Schedule, SgdState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scripted(seed: u64, steps: usize, len: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = (0..steps)
        .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (w0, grads)
}

fn run(opt: &mut SgdState, w0: &[f64], grads: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut w = w0.to_vec();
    let mut lrs = Vec::new();
    for g in grads {
        lrs.push(opt.clone().current_lr());
        opt.step(&mut [w.as_mut_slice()], &[g.as_slice()]).unwrap();
    }
    (w, lrs)
}

#[test]
fn hundred_steps_replay_the_momentum_recurrence() {
    for (seed, schedule) in [
        (1, Schedule::Constant),
        (2, Schedule::poly(150)),
        (3, Schedule::poly(60)),
    ] {
        let (w0, grads) = scripted(seed, 100, 7);
        let mut opt = SgdState::new(0.9, 0.05, schedule, &[7]).unwrap();
        let (w, lrs) = run(&mut opt, &w0, &grads);
        let expected = sgd_replay(&w0, &grads, 0.9, &lrs);
        for (a, b) in w.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(opt.iter, 100);
    }
}

#[test]
fn poly_schedule_endpoints_are_exact() {
    let mut opt = SgdState::new(0.5, 0.02, Schedule::poly(10), &[1]).unwrap();
    assert_eq!(opt.current_lr(), 0.02);
    let mut w = [0.0];
    for _ in 0..10 {
        opt.step(&mut [&mut w[..]], &[&[1.0][..]]).unwrap();
    }
    assert_eq!(opt.current_lr(), 0.0);
    assert!(opt.finished);
}

#[test]
fn plateau_divides_after_patience_stale_evaluations() {
    let mut opt = SgdState::new(0.9, 0.1, Schedule::plateau(), &[1]).unwrap();
    assert!(!opt.report_validation(0.5));
    assert!(!opt.report_validation(0.5005));
    assert!(!opt.report_validation(0.4));
    assert!(opt.report_validation(0.5009));
    assert!((opt.current_lr() - 0.01).abs() < 1e-18);
    // a real improvement resets the count
    assert!(!opt.report_validation(0.6));
    assert!(!opt.report_validation(0.6));
    assert!((opt.current_lr() - 0.01).abs() < 1e-18);
}

#[test]
fn shape_mismatch_is_rejected_without_side_effects() {
    let mut opt = SgdState::new(0.9, 0.1, Schedule::Constant, &[2]).unwrap();
    let mut w = [1.0, 2.0, 3.0];
    assert!(opt
        .step(&mut [&mut w[..]], &[&[0.0, 0.0, 0.0][..]])
        .is_err());
    assert_eq!(w, [1.0, 2.0, 3.0]);
    assert_eq!(opt.iter, 0);
}
