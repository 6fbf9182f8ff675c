use iene_core::datagen::{generate_linear_scm, LinearScmConfig};
use iene_core::oracle::*;
use iene_core::Error;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal))
}

#[test]
fn residuals_are_orthogonal_to_the_design() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = gaussian(&mut rng, 200, 5);
    let y: Array1<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let b = ols(&x, &y).unwrap();
    let r = &y - &x.dot(&b);
    let g = x.t().dot(&r);
    assert!(g.iter().all(|v| v.abs() < 1e-8), "{g}");
}

#[test]
fn noise_free_invariant_fit_recovers_beta() {
    let cfg = LinearScmConfig {
        beta: Some(vec![1.5, -0.7]),
        target_noise: 0.0,
        samples_per_env: 200,
        ..LinearScmConfig::default()
    };
    let s = generate_linear_scm(&cfg).unwrap();
    let xi: Vec<Array2<f64>> = s.latent.iter().map(|l| l.slice(ndarray::s![.., 0..2]).to_owned()).collect();
    let sol = per_env_ols(&xi, &s.y).unwrap();
    for b in sol.per_env.iter().chain([&sol.pooled]) {
        assert!((b[0] - 1.5).abs() < 1e-8 && (b[1] + 0.7).abs() < 1e-8, "{b}");
    }
    // the same through the unmixing map
    let report = check_linear_identifiability(&s).unwrap();
    for b in &report.restricted.per_env {
        assert!((b[0] - 1.5).abs() < 1e-8 && (b[1] + 0.7).abs() < 1e-8, "{b}");
    }
}

#[test]
fn opposite_shifts_cancel_in_the_pooled_fit() {
    let s = generate_linear_scm(&LinearScmConfig::default()).unwrap();
    let sol = per_env_ols(&s.latent, &s.y).unwrap();
    for j in 2..4 {
        assert!(sol.pooled[j].abs() < 0.05, "pooled spurious {}", sol.pooled[j]);
        let (a, b) = (sol.per_env[0][j], sol.per_env[1][j]);
        assert!(a > 0.1 && b < -0.1, "per-env spurious {a} {b}");
    }
}

#[test]
fn single_environment_pooled_equals_per_env() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(&mut rng, 50, 3);
    let y: Array1<f64> = x.sum_axis(Axis(1)) + 0.1;
    let sol = per_env_ols(std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap();
    assert_eq!(sol.pooled, sol.per_env[0]);
    assert_eq!(sol.disagreement(), 0.0);
}

#[test]
fn rank_deficient_design_is_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = gaussian(&mut rng, 30, 2);
    let x = ndarray::concatenate![Axis(1), a, a.column(0).insert_axis(Axis(1))];
    let y = Array1::zeros(30);
    assert!(matches!(ols(&x, &y), Err(Error::Degenerate(_))));
    assert!(matches!(ols(&x, &Array1::zeros(3)), Err(Error::Shape(_))));
}

#[test]
fn identifiability_on_separated_environments() {
    let s = generate_linear_scm(&LinearScmConfig::default()).unwrap();
    let r = check_linear_identifiability(&s).unwrap();
    assert!(r.restricted_disagreement < r.restricted_threshold, "{}", r.restricted_disagreement);
    assert!(r.unrestricted_disagreement > r.unrestricted_threshold, "{}", r.unrestricted_disagreement);
    assert!(r.identifiable);
}

#[test]
fn identical_environments_are_flagged() {
    let s = generate_linear_scm(&LinearScmConfig {
        env_shift_scales: vec![1.0, 1.0],
        ..LinearScmConfig::default()
    })
    .unwrap();
    let r = check_linear_identifiability(&s).unwrap();
    assert!(r.restricted_disagreement < 0.05);
    assert!(r.unrestricted_disagreement < 0.05);
    assert!(!r.identifiable);
}

#[test]
fn zero_beta_gives_zero_invariant_predictor() {
    let s = generate_linear_scm(&LinearScmConfig {
        beta: Some(vec![0.0, 0.0]),
        ..LinearScmConfig::default()
    })
    .unwrap();
    let r = check_linear_identifiability(&s).unwrap();
    assert!(r.restricted_disagreement < 0.05);
    for b in &r.restricted.per_env {
        assert!(b.iter().all(|v| v.abs() < 0.05), "{b}");
    }
}

#[test]
fn brute_variance_cases() {
    assert_eq!(brute_variance(&Array2::from_elem((4, 3), 2.5)), (0.0, 0.0));
    assert_eq!(brute_variance(&ndarray::array![[1.0, 0.0], [0.0, 1.0]]), (0.0, 0.25));
}

#[test]
fn permutation_test_detects_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 200, 3);
    let t = hsic_permutation_test(&x, &x, 200, 0).unwrap();
    assert!(t.p_value < 0.01);
}

#[test]
fn permutation_test_is_calibrated_under_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trials = 40;
    let mut above = 0;
    for i in 0..trials {
        let x = gaussian(&mut rng, 100, 2);
        let y = gaussian(&mut rng, 100, 2);
        if hsic_permutation_test(&x, &y, 100, i).unwrap().p_value > 0.05 {
            above += 1;
        }
    }
    assert!(above as f64 >= 0.9 * trials as f64, "{above}/{trials}");
}

#[test]
fn permutation_test_input_errors() {
    let x = Array2::zeros((10, 2));
    assert!(matches!(hsic_permutation_test(&x, &x, 0, 0), Err(Error::Config(_))));
    assert!(matches!(hsic_permutation_test(&x, &Array2::zeros((9, 2)), 10, 0), Err(Error::Shape(_))));
}
