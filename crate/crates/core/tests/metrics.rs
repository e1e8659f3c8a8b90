use mmflow_core::eval::{fit_gaussian, frechet_distance, gaussian_kl, GaussianStats};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_d(mean: f64, var: f64) -> GaussianStats {
    GaussianStats::from_moments(vec![mean], vec![var], 100).unwrap()
}

fn cloud(seed: u64, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..d).map(|i| scale * (0..d).map(|k| mix[i * d + k] * g[k]).sum::<f64>() + 0.3 * i as f64).collect()
        })
        .collect()
}

/// Orthogonal matrix from the QR factorization of a random square matrix.
fn rotation(seed: u64, d: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

fn rotate(rows: &[Vec<f64>], q: &DMatrix<f64>) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let v = q * nalgebra::DVector::from_column_slice(r);
            v.iter().copied().collect()
        })
        .collect()
}

#[test]
fn one_dimensional_closed_forms() {
    let fd = |a, b| frechet_distance(&a, &b).unwrap();
    let kl = |a, b| gaussian_kl(&a, &b).unwrap();
    assert!((fd(one_d(0.0, 1.0), one_d(3.0, 1.0)) - 9.0).abs() < 1e-9);
    assert!((fd(one_d(0.0, 1.0), one_d(0.0, 4.0)) - 1.0).abs() < 1e-9);
    assert!((kl(one_d(0.0, 1.0), one_d(1.0, 1.0)) - 0.5).abs() < 1e-9);
    let forward = kl(one_d(0.0, 1.0), one_d(0.0, 4.0));
    let backward = kl(one_d(0.0, 4.0), one_d(0.0, 1.0));
    // ln(σb/σa) + σa²/(2σb²) − 1/2, both directions.
    assert!((forward - (2f64.ln() + 1.0 / 8.0 - 0.5)).abs() < 1e-9);
    assert!((backward - (-(2f64.ln()) + 2.0 - 0.5)).abs() < 1e-9);
}

#[test]
fn ground_truth_against_itself_is_zero() {
    let a = fit_gaussian(&cloud(3, 200, 6, 1.0)).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    assert!(gaussian_kl(&a, &a).unwrap().abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frechet_is_symmetric(sa in 0u64..10_000, sb in 0u64..10_000, d in 1usize..6) {
        let a = fit_gaussian(&cloud(sa, 40, d, 1.0)).unwrap();
        let b = fit_gaussian(&cloud(sb, 40, d, 1.7)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab), "{} vs {}", ab, ba);
    }

    #[test]
    fn frechet_is_rotation_invariant(sa in 0u64..10_000, sb in 0u64..10_000, sq in 0u64..10_000, d in 2usize..7) {
        let xa = cloud(sa, 60, d, 1.0);
        let xb = cloud(sb, 60, d, 0.6);
        let q = rotation(sq, d);
        let before = frechet_distance(&fit_gaussian(&xa).unwrap(), &fit_gaussian(&xb).unwrap()).unwrap();
        let after = frechet_distance(
            &fit_gaussian(&rotate(&xa, &q)).unwrap(),
            &fit_gaussian(&rotate(&xb, &q)).unwrap(),
        ).unwrap();
        prop_assert!((before - after).abs() < 1e-6, "{} vs {}", before, after);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_identity(sa in 0u64..10_000, sb in 0u64..10_000, d in 1usize..6) {
        let a = fit_gaussian(&cloud(sa, 30, d, 1.0)).unwrap();
        let b = fit_gaussian(&cloud(sb, 30, d, 2.0)).unwrap();
        prop_assert!(gaussian_kl(&a, &b).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(&b, &a).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn one_d_frechet_matches_formula(m1 in -5.0f64..5.0, m2 in -5.0f64..5.0, v1 in 0.01f64..9.0, v2 in 0.01f64..9.0) {
        let want = (m1 - m2).powi(2) + v1 + v2 - 2.0 * (v1 * v2).sqrt();
        let got = frechet_distance(&one_d(m1, v1), &one_d(m2, v2)).unwrap();
        prop_assert!((got - want.max(0.0)).abs() < 1e-9);
        let kl_want = 0.5 * (v1 / v2 + (m2 - m1).powi(2) / v2 - 1.0 + (v2 / v1).ln());
        prop_assert!((gaussian_kl(&one_d(m1, v1), &one_d(m2, v2)).unwrap() - kl_want).abs() < 1e-9);
    }
}
