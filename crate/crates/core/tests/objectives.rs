use iene_core::autograd::Tape;
use iene_core::datagen::{generate_scm_dataset, ScmConfig};
use iene_core::nets::{gradient_check, Optimizer, OptimizerKind, ParameterSet};
use iene_core::objectives::*;
use iene_core::oracle::{brute_hsic, brute_variance, hsic_permutation_test, logistic_probe};
use iene_core::partition::{stage_one_train, StageOneConfig};
use iene_core::nets::{EncoderConfig, ModelConfig};
use iene_core::Error;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal))
}

fn on_tape<T>(f: impl FnOnce(&mut Tape) -> T) -> T {
    let mut t = Tape::new();
    f(&mut t)
}

fn penalty(shared: &[f64], envs: &[Vec<f64>], rho: &Array2<f64>) -> f64 {
    let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap();
    let e: Vec<Array2<f64>> = envs.iter().map(|v| col(v)).collect();
    invariance_penalty_value(&col(shared), &e, rho).unwrap()
}

// ---- ERM and weighted risks ----

#[test]
fn erm_extremes() {
    let perfect = array![[60.0, 0.0, 0.0], [0.0, 60.0, 0.0]];
    assert!(erm_risk_value(&perfect, &[0, 1], &[true, true]).unwrap() < 1e-6);
    let uniform = Array2::zeros((4, 5));
    let r = erm_risk_value(&uniform, &[0, 1, 2, 3], &[true; 4]).unwrap();
    assert!((r - 5f64.ln()).abs() < 1e-12);
    assert!(matches!(erm_risk_value(&uniform, &[0, 1, 2, 3], &[false; 4]), Err(Error::Input(_))));
}

#[test]
fn erm_matches_independent_log_loss_of_a_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(&mut rng, 300, 4);
    let labels: Vec<usize> = x.rows().into_iter().map(|r| usize::from(r[0] + 0.5 * r[1] > 0.0)).collect();
    let probe = logistic_probe(&x, &labels, 2, 1e-3, 200);
    let scores = probe.scores(&x);
    let mask: Vec<bool> = (0..300).map(|i| i % 3 != 0).collect();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..300 {
        if !mask[i] {
            continue;
        }
        let (a, b) = (scores[[i, 0]], scores[[i, 1]]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - scores[[i, labels[i]]];
        count += 1;
    }
    let expected = total / count as f64;
    let got = erm_risk_value(&scores, &labels, &mask).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn weighted_env_risk_cases() {
    let losses = array![[0.3], [1.2], [0.7], [2.0]];
    let one_hot = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
    let uniform = Array2::from_elem((4, 2), 0.5);
    on_tape(|t| {
        let l = t.constant(losses.clone());
        let r = t.constant(one_hot.clone());
        let r0 = weighted_env_risk(t, l, r, 0).unwrap();
        let r1 = weighted_env_risk(t, l, r, 1).unwrap();
        assert!((t.scalar(r0) - 1.05).abs() < 1e-12);
        assert_eq!(t.scalar(r1), 0.0);
        let u = t.constant(uniform.clone());
        let u0 = weighted_env_risk(t, l, u, 0).unwrap();
        assert!((t.scalar(u0) - 1.05 / 2.0).abs() < 1e-12);
        assert!(matches!(weighted_env_risk(t, l, r, 2), Err(Error::Index(_))));
    });

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l: Array2<f64> = Array2::from_shape_fn((10, 1), |_| rng.random::<f64>() * 3.0);
    let raw: Array2<f64> = Array2::from_shape_fn((10, 3), |_| rng.random::<f64>());
    let rho = &raw / &raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    for k in 0..3 {
        let expected: f64 = (0..10).map(|v| rho[[v, k]] * l[[v, 0]]).sum::<f64>() / 10.0;
        let got = on_tape(|t| {
            let (a, b) = (t.constant(l.clone()), t.constant(rho.clone()));
            let r = weighted_env_risk(t, a, b, k).unwrap();
            t.scalar(r)
        });
        assert!((got - expected).abs() < 1e-12);
    }
}

// ---- invariance penalty ----

#[test]
fn identical_classifiers_have_zero_penalty() {
    let l = vec![0.5, 1.0, 0.2];
    let rho = array![[0.2, 0.8], [0.6, 0.4], [1.0, 0.0]];
    assert_eq!(penalty(&l, &[l.clone(), l.clone()], &rho), 0.0);
}

#[test]
fn better_environment_classifiers_give_positive_penalty() {
    // nodes 0,1 in env 0 and nodes 2,3 in env 1; each c_k is better on its own nodes
    let shared = [1.0, 1.0, 1.0, 1.0];
    let c1 = vec![0.4, 0.6, 2.0, 2.0];
    let c2 = vec![2.0, 2.0, 0.5, 0.1];
    let rho = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    // env 0: (2 - 1)/4 ; env 1: (2 - 0.6)/4
    let p = penalty(&shared, &[c1, c2], &rho);
    assert!((p - (1.0 + 1.4) / 4.0).abs() < 1e-12);
    assert!(p > 0.0);
}

#[test]
fn single_environment_penalty_is_the_risk_gap() {
    let shared = [0.9, 0.1, 0.5];
    let own = vec![0.3, 0.3, 0.3];
    let rho = Array2::ones((3, 1));
    let p = penalty(&shared, &[own], &rho);
    assert!((p - (0.5 - 0.3)).abs() < 1e-12);
}

#[test]
fn penalty_shape_mismatch_is_an_error() {
    let col = Array2::ones((3, 1));
    assert!(matches!(
        invariance_penalty_value(&col, &[col.clone()], &Array2::from_elem((3, 2), 0.5)),
        Err(Error::Shape(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn penalty_ignores_a_shared_constant_shift(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..12);
        let k = rng.random_range(2..5);
        let shared: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let envs: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let raw = Array2::from_shape_fn((n, k), |_| rng.random::<f64>() + 0.01);
        let rho = &raw / &raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let base = penalty(&shared, &envs, &rho);
        let s: Vec<f64> = shared.iter().map(|v| v + shift).collect();
        let e: Vec<Vec<f64>> = envs.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
        prop_assert!((penalty(&s, &e, &rho) - base).abs() < 1e-10);
    }

    #[test]
    fn nvrex_dominates_vrex(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=12);
        let k = rng.random_range(2..=4);
        let l = Array2::from_shape_fn((n, k), |_| rng.random::<f64>() * 4.0);
        let m = LossMatrix::new(l.clone());
        let (v, nv) = (vrex_value(&m).unwrap(), nvrex_value(&m).unwrap());
        prop_assert!(nv - v >= -1e-12, "nvrex {nv} < vrex {v}");
        let (bv, bnv) = brute_variance(&l);
        prop_assert!((v - bv).abs() < 1e-12 && (nv - bnv).abs() < 1e-12);
    }

    #[test]
    fn hsic_matches_the_double_loop(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..30);
        let (p, q) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = gaussian(&mut rng, n, p);
        let y = gaussian(&mut rng, n, q);
        let fast = hsic_value(&x, &y).unwrap();
        let slow = brute_hsic(&x, &y);
        prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0));
    }
}

#[test]
fn nvrex_dominates_vrex_on_eight_by_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let l = Array2::from_shape_fn((8, 3), |_| rng.random::<f64>() * 2.0);
        let m = LossMatrix::new(l);
        assert!(nvrex_value(&m).unwrap() - vrex_value(&m).unwrap() >= -1e-12);
    }
}

#[test]
fn nvrex_equals_vrex_when_every_node_deviates_alike() {
    let pattern = [0.3, -0.1, -0.2];
    let l = Array2::from_shape_fn((6, 3), |(v, k)| 1.0 + v as f64 * 0.4 + pattern[k]);
    let m = LossMatrix::new(l);
    assert!((nvrex_value(&m).unwrap() - vrex_value(&m).unwrap()).abs() < 1e-12);
}

// ---- variance penalties ----

#[test]
fn variance_penalty_cases() {
    let flat = LossMatrix::new(Array2::from_elem((3, 2), 0.7));
    assert_eq!(vrex_value(&flat).unwrap(), 0.0);
    assert_eq!(nvrex_value(&flat).unwrap(), 0.0);
    let cross = LossMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(vrex_value(&cross).unwrap(), 0.0);
    assert!((nvrex_value(&cross).unwrap() - 0.25).abs() < 1e-15);
    let single = LossMatrix::new(Array2::ones((3, 1)));
    assert!(matches!(vrex_value(&single), Err(Error::Config(_))));
    assert!(matches!(nvrex_value(&single), Err(Error::Config(_))));
}

#[test]
fn node_mask_selects_rows() {
    let mut m = LossMatrix::new(array![[1.0, 0.0], [5.0, 5.0]]);
    m.node_mask = vec![false, true];
    assert_eq!(nvrex_value(&m).unwrap(), 0.0);
    m.node_mask = vec![false, false];
    assert!(matches!(nvrex_value(&m), Err(Error::Input(_))));
}

// ---- HSIC ----

#[test]
fn self_hsic_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, 50, 5);
    assert!((hsic_normalized_value(&x, &x).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn independent_gaussians_have_small_hsic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 500, 8);
    let y = gaussian(&mut rng, 500, 8);
    let h = hsic_normalized_value(&x, &y).unwrap();
    assert!(h < 0.05, "normalized HSIC {h}");
    let test = hsic_permutation_test(&x, &y, 200, 0).unwrap();
    assert!(test.p_value > 0.01, "p = {}", test.p_value);
}

#[test]
fn row_shuffled_copy_looks_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, 500, 8);
    let mut order: Vec<usize> = (0..500).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let y = x.select(ndarray::Axis(0), &order);
    assert!(hsic_normalized_value(&x, &y).unwrap() < 0.05);
    let test = hsic_permutation_test(&x, &y, 200, 1).unwrap();
    assert!(test.p_value > 0.01, "p = {}", test.p_value);
    let dep = hsic_permutation_test(&x, &(&x * 2.0), 200, 1).unwrap();
    assert!(dep.p_value < 0.01);
}

#[test]
fn normalized_hsic_is_rotation_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(&mut rng, 60, 4);
    let y = &x.slice(ndarray::s![.., 0..3]).to_owned() + &(gaussian(&mut rng, 60, 3) * 0.5);
    let base = hsic_normalized_value(&x, &y).unwrap();
    // random orthogonal matrix from QR of a Gaussian
    let g = nalgebra::DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let qa = Array2::from_shape_fn((4, 4), |(i, j)| q[(i, j)]);
    let rotated = x.dot(&qa) * 3.5;
    let got = hsic_normalized_value(&rotated, &(&y * 0.2)).unwrap();
    assert!((got - base).abs() < 1e-8);
}

#[test]
fn hsic_input_errors() {
    let x = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64);
    let constant = Array2::from_elem((5, 2), 3.0);
    assert!(matches!(hsic_normalized_value(&x, &constant), Err(Error::Degenerate(_))));
    assert!(matches!(hsic_value(&x.slice(ndarray::s![0..3, ..]).to_owned(), &x.slice(ndarray::s![0..3, ..]).to_owned()), Err(Error::Input(_))));
    assert!(matches!(hsic_value(&x, &Array2::zeros((4, 2))), Err(Error::Shape(_))));
}

// ---- composites ----

#[test]
fn partition_objective_arithmetic() {
    let v = on_tape(|t| {
        let (r, p) = (t.scalar_const(0.7), t.scalar_const(0.05));
        let a = partition_objective(t, r, p, 4.0);
        let b = partition_objective(t, r, p, 0.0);
        let zero = t.scalar_const(0.0);
        let c = partition_objective(t, r, zero, 9.0);
        (t.scalar(a), t.scalar(b), t.scalar(c))
    });
    assert!((v.0 - 0.9).abs() < 1e-12);
    assert_eq!(v.1, 0.7);
    assert_eq!(v.2, 0.7);
}

#[test]
fn dynamic_objective_cases() {
    on_tape(|t| {
        let a = t.constant(array![[1.0], [0.0]]);
        let b = t.constant(array![[0.0], [1.0]]);
        let ld = dynamic_objective(t, &[a, b], 1.0, VariancePenalty::Nvrex).unwrap();
        assert!((t.scalar(ld) - 0.75).abs() < 1e-12);
        let plain = dynamic_objective(t, &[a, b], 0.0, VariancePenalty::Nvrex).unwrap();
        assert!((t.scalar(plain) - 0.5).abs() < 1e-12);
        let c = t.constant(array![[0.2], [0.9], [0.4]]);
        let same = dynamic_objective(t, &[c, c, c], 1.0, VariancePenalty::Nvrex).unwrap();
        assert!((t.scalar(same) - 0.5).abs() < 1e-12);
    });
}

#[test]
fn extrapolation_loss_cases() {
    on_tape(|t| {
        let v0 = t.constant(array![[80.0, 0.0], [80.0, 0.0]]);
        let v1 = t.constant(array![[0.0, 80.0], [0.0, 80.0]]);
        let l = extrapolation_loss(t, &[v0, v1]).unwrap();
        assert!(t.scalar(l) < 1e-6);
        let u: Vec<_> = (0..3).map(|_| t.constant(Array2::zeros((4, 3)))).collect();
        let l = extrapolation_loss(t, &u).unwrap();
        assert!((t.scalar(l) - 3f64.ln()).abs() < 1e-12);
        let bad = t.constant(Array2::zeros((4, 3)));
        assert!(matches!(extrapolation_loss(t, &[bad, bad]), Err(Error::Config(_))));
    });
}

#[test]
fn disentangle_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&mut rng, 20, 3);
    let he = gaussian(&mut rng, 20, 4);
    let hi = gaussian(&mut rng, 20, 4);
    on_tape(|t| {
        let (xv, hev, hiv) = (t.constant(x.clone()), t.constant(he.clone()), t.constant(hi.clone()));
        let perfect = disentangle_loss(t, xv, xv, hev, hiv, 1.0).unwrap();
        let h = hsic_normalized_value(&he, &hi).unwrap();
        assert!((t.scalar(perfect) - h).abs() < 1e-12);
        let rec = t.constant(&x + 1.0);
        let mse = disentangle_loss(t, rec, xv, hev, hiv, 0.0).unwrap();
        assert!((t.scalar(mse) - 1.0).abs() < 1e-12);
        let flat = t.constant(Array2::zeros((20, 4)));
        assert!(matches!(disentangle_loss(t, rec, xv, flat, hiv, 1.0), Err(Error::Degenerate(_))));
    });
}

#[test]
fn disentanglement_decreases_during_the_first_steps() {
    let cfg = ScmConfig {
        num_nodes: 50,
        num_test_graphs: 1,
        ..ScmConfig::default()
    };
    let ds = generate_scm_dataset(&cfg).unwrap();
    let model = ModelConfig::new(EncoderConfig::default(), ds.feature_dim(), ds.num_classes(), 2);
    let s1 = StageOneConfig {
        annealing_iters: 1,
        disentangle_iters: 51,
        eta: 1.0,
        ..StageOneConfig::default()
    };
    let out = stage_one_train(&ds, &model, &s1).unwrap();
    let trace = out.trace.values("disentangle");
    assert!(trace[0].is_finite() && trace[0] > 0.0);
    let drops = trace.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 45, "decreased in {drops} of 50 steps: {trace:?}");
}

fn single_group(arrays: Vec<Array2<f64>>) -> ParameterSet {
    let mut ps = ParameterSet::new();
    ps.insert("x", arrays, Optimizer::new(OptimizerKind::Sgd, 0.1)).unwrap();
    ps
}

#[test]
fn objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (gaussian(&mut rng, 12, 3), gaussian(&mut rng, 12, 2));
    let ps = single_group(vec![a, b]);
    let err = gradient_check(&ps, &["x"], 200, 0, |t, bd| {
        let v = bd.get("x");
        hsic_normalized(t, v[0], v[1]).unwrap()
    });
    assert!(err < 1e-4, "normalized HSIC {err}");

    let losses = Array2::from_shape_fn((9, 3), |_| rng.random::<f64>() + 0.1);
    let raw = Array2::from_shape_fn((9, 3), |_| rng.random::<f64>());
    let shared = Array2::from_shape_fn((9, 1), |_| rng.random::<f64>());
    let ps = single_group(vec![losses, raw, shared]);
    let err = gradient_check(&ps, &["x"], 200, 1, |t, bd| {
        let v = bd.get("x");
        let rho = t.softmax_rows(v[1]);
        let envs: Vec<_> = (0..3).map(|k| column(t, v[0], k)).collect();
        let p = invariance_penalty(t, v[2], &envs, rho).unwrap();
        let n = nvrex(t, v[0]).unwrap();
        let r = vrex(t, v[0]).unwrap();
        let s = t.add(p, n);
        t.add(s, r)
    });
    assert!(err < 1e-4, "penalties {err}");

    let logits = gaussian(&mut rng, 6, 2);
    let logits2 = gaussian(&mut rng, 6, 2);
    let ps = single_group(vec![logits, logits2]);
    let err = gradient_check(&ps, &["x"], 200, 2, |t, bd| {
        let v = bd.get("x");
        let e = extrapolation_loss(t, &[v[0], v[1]]).unwrap();
        let l0 = node_ce(t, v[0], &[0, 1, 1, 0, 1, 0]);
        let l1 = node_ce(t, v[1], &[1, 1, 0, 0, 1, 0]);
        let d = dynamic_objective(t, &[l0, l1], 1.0, VariancePenalty::Nvrex).unwrap();
        t.add(e, d)
    });
    assert!(err < 1e-4, "extrapolation and dynamic {err}");
}
