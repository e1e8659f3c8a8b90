use mmflow_core::align::{sample_mask, MaskPattern};
use mmflow_core::flowmatch::{
    conditional_field, marginal_field_oracle, ot_point, sigma_t, target_field, wasserstein1, TargetSpec,
};
use mmflow_core::tensor::gradcheck;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vecs(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0f64..3.0, len), prop::collection::vec(-3.0f64..3.0, len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_starts_at_noise_and_ends_near_data((x0, x1) in vecs(4), s in 0.0f64..0.1) {
        prop_assert_eq!(ot_point(&x0, &x1, 0.0, s).unwrap(), x0.clone());
        let end = ot_point(&x0, &x1, 1.0, s).unwrap();
        for j in 0..4 {
            prop_assert!((end[j] - (x1[j] + s * x0[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_target_is_the_displacement((x0, x1) in vecs(5)) {
        let u = target_field(&x0, &x1, 0.0).unwrap();
        for j in 0..5 {
            prop_assert_eq!(u[j], x1[j] - x0[j]);
        }
    }

    #[test]
    fn target_is_the_path_derivative((x0, x1) in vecs(3), s in 0.0f64..0.1, t in 0.01f64..0.99) {
        let h = 1e-6;
        let a = ot_point(&x0, &x1, t + h, s).unwrap();
        let b = ot_point(&x0, &x1, t - h, s).unwrap();
        let u = target_field(&x0, &x1, s).unwrap();
        for j in 0..3 {
            prop_assert!(((a[j] - b[j]) / (2.0 * h) - u[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn conditional_field_recovers_the_target((x0, x1) in vecs(1), s in 1e-4f64..0.1, t in 0.0f64..0.99) {
        let xt = ot_point(&x0, &x1, t, s).unwrap()[0];
        let u = target_field(&x0, &x1, s).unwrap()[0];
        prop_assert!((conditional_field(xt, x1[0], t, s) - u).abs() < 1e-9 * (1.0 + u.abs()) / sigma_t(t, s));
    }

    #[test]
    fn symmetric_two_point_field_is_odd(x in -2.0f64..2.0, t in 0.0f64..0.95) {
        let spec = TargetSpec::Points(vec![(0.5, -1.0), (0.5, 1.0)]);
        let a = marginal_field_oracle(x, t, &spec, 1e-4).unwrap();
        let b = marginal_field_oracle(-x, t, &spec, 1e-4).unwrap();
        prop_assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_holds_for_random_seeds(seed in 0u64..1_000_000, op in 0usize..gradcheck::OPS.len()) {
        let r = gradcheck::check(gradcheck::OPS[op], seed).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{}: {}", r.op, r.max_rel_error);
    }
}

#[test]
fn out_of_range_time_is_rejected() {
    assert!(ot_point(&[0.0], &[1.0], -0.1, 0.0).is_err());
    assert!(marginal_field_oracle(0.0, 1.2, &TargetSpec::Points(vec![(1.0, 0.0)]), 1e-4).is_err());
}

#[test]
fn every_tape_op_passes_gradient_checks() {
    let reports = gradcheck::check_all(6, 0).unwrap();
    assert!(reports.len() >= 100);
    for r in reports {
        assert!(r.max_rel_error < 1e-4, "{} (seed {}): {}", r.op, r.seed, r.max_rel_error);
    }
}

#[test]
fn masks_are_uniform_over_seven_patterns() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 7];
    let n = 70_000;
    for _ in 0..n {
        let m = sample_mask(&mut rng);
        assert!(m.count() > 0, "all-false mask drawn");
        counts[m.index().unwrap()] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let f = *c as f64 / n as f64;
        assert!((f - 1.0 / 7.0).abs() < 0.01, "{}: {f}", MaskPattern::ALL[i].label());
    }
}

#[test]
fn wasserstein_matches_sorted_pairing() {
    let a = [0.0, 3.0, 1.0];
    let b = [2.0, -1.0, 1.0];
    // sorted: (-1,0) (1,1) (2,3)
    assert!((wasserstein1(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}
