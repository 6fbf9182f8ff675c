use iene_core::autograd::Tape;
use iene_core::datagen::{generate_scm_dataset, CausalVariant, ScmConfig};
use iene_core::extrapolate::*;
use iene_core::graph::validate_graph;
use iene_core::nets::{
    gradient_check, init_parameters, EncoderConfig, GraphInput, LearningRates, ModelConfig, Nets, Optimizer,
    OptimizerKind, Structure,
};
use iene_core::objectives::extrapolation_loss;
use iene_core::partition::{stage_one_train, StageOneConfig};
use iene_core::{Error, Graph};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sym(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn intervention_algebra(seed in any::<u64>(), n in 1usize..16, pa in 0.0f64..1.0, ps in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_sym(n, pa, &mut rng);
        let s = random_sym(n, ps, &mut rng);
        let out = apply_structural_intervention(&a, &s).unwrap();
        for i in 0..n {
            prop_assert_eq!(out[[i, i]], 0.0);
            for j in 0..n {
                prop_assert!(out[[i, j]] == 0.0 || out[[i, j]] == 1.0);
                prop_assert_eq!(out[[i, j]], out[[j, i]]);
                if i != j {
                    let expected = match (a[[i, j]], s[[i, j]]) {
                        (x, 0.0) => x,
                        (1.0, 1.0) => 0.0,
                        (_, _) => 1.0,
                    };
                    prop_assert_eq!(out[[i, j]], expected);
                }
            }
        }
        prop_assert_eq!(apply_structural_intervention(&a, &Array2::zeros((n, n))).unwrap(), a);
    }
}

#[test]
fn invalid_masks_are_rejected() {
    let a = Array2::zeros((3, 3));
    let mut s = Array2::zeros((3, 3));
    s[[0, 1]] = 0.5;
    s[[1, 0]] = 0.5;
    assert!(matches!(apply_structural_intervention(&a, &s), Err(Error::Input(_))));
    let mut s = Array2::zeros((3, 3));
    s[[0, 1]] = 1.0;
    assert!(matches!(apply_structural_intervention(&a, &s), Err(Error::Input(_))));
    assert!(matches!(apply_structural_intervention(&a, &Array2::zeros((2, 2))), Err(Error::Shape(_))));
}

#[test]
fn relaxed_view_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_sym(8, 0.3, &mut rng);
    assert_eq!(relaxed_view(&a, &Array2::zeros((8, 8))), a);
    let (i, j) = (0..8)
        .flat_map(|i| (i + 1..8).map(move |j| (i, j)))
        .find(|&(i, j)| a[[i, j]] == 0.0)
        .unwrap();
    let mut theta = Array2::zeros((8, 8));
    theta[[i, j]] = 1.0;
    theta[[j, i]] = 1.0;
    let v = relaxed_view(&a, &theta);
    assert_eq!(v[[i, j]], 1.0);
    let mut back = v.clone();
    back[[i, j]] = 0.0;
    back[[j, i]] = 0.0;
    assert_eq!(back, a);
    let half = relaxed_view(&a, &Array2::from_elem((8, 8), 0.3));
    assert!(half.iter().all(|v| (0.0..=1.0).contains(v)));
}

fn graph_of(a: Array2<f64>, d: usize, seed: u64) -> Graph {
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::from_edges(n, &[], Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)), vec![0; n], 2)
        .unwrap();
    g.adjacency = a;
    g.train_mask = vec![true; n];
    g
}

#[test]
fn extrapolation_gradient_in_theta_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = graph_of(random_sym(15, 0.2, &mut rng), 4, 2);
    let cfg = ModelConfig::new(
        EncoderConfig {
            hidden_dim: 8,
            output_dim: 6,
            ..EncoderConfig::default()
        },
        4,
        2,
        2,
    );
    let mut params = init_parameters(&cfg, LearningRates::default(), 3).unwrap();
    let pairs = candidate_pairs(&g, 2, 0);
    let m = pairs.len();
    let thetas: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((1, m), |_| rng.random_range(0.05..0.95)))
        .collect();
    params.insert("theta", thetas, Optimizer::new(OptimizerKind::Sgd, 0.1)).unwrap();
    let err = gradient_check(&params, &["theta"], 200, 4, |tape: &mut Tape, b| {
        let nets = Nets::new(&cfg);
        let logits: Vec<_> = b
            .get("theta")
            .iter()
            .map(|&theta| {
                let adj = relaxed_view_tape(tape, &g.adjacency, theta, &pairs);
                let x = tape.constant(g.features.clone());
                let gi = GraphInput {
                    x,
                    structure: Structure::Relaxed(adj),
                    seed: 0,
                };
                let h = nets.env_features(tape, b, gi);
                nets.env_logits(tape, b, h)
            })
            .collect();
        extrapolation_loss(tape, &logits).unwrap()
    });
    assert!(err < 1e-4, "max relative error {err}");
}

fn small_dataset(variant: CausalVariant) -> iene_core::MultiGraphDataset {
    generate_scm_dataset(&ScmConfig {
        num_nodes: 120,
        causal_variant: variant,
        num_test_graphs: 1,
        ..ScmConfig::default()
    })
    .unwrap()
}

fn model_for(ds: &iene_core::MultiGraphDataset, k: usize) -> ModelConfig {
    ModelConfig::new(EncoderConfig::default(), ds.feature_dim(), ds.num_classes(), k)
}

#[test]
fn untrained_recognizer_gives_no_signal() {
    let ds = small_dataset(CausalVariant::B);
    for k in [2, 3] {
        let cfg = model_for(&ds, k);
        let mut params = init_parameters(&cfg, LearningRates::default(), 0).unwrap();
        let zeros = params.arrays("w").iter().map(|a| Array2::zeros(a.dim())).collect();
        params.replace_group("w", zeros).unwrap();
        let g = &ds.train_graphs[0];
        let set = optimize_views(g, &params, &cfg, k, &ViewOptions::default(), 0).unwrap();
        for t in 0..k {
            let trace = set.trace.values(&format!("extrapolation_loss_{t}"));
            let last = *trace.last().unwrap();
            assert!(last >= (k as f64).ln() - 0.01, "view {t}: {last}");
        }
    }
}

#[test]
fn budget_errors() {
    let ds = small_dataset(CausalVariant::A);
    let cfg = model_for(&ds, 2);
    let params = init_parameters(&cfg, LearningRates::default(), 0).unwrap();
    let g = &ds.train_graphs[0];
    let zero = ViewOptions {
        budget: Some(0),
        ..ViewOptions::default()
    };
    assert!(matches!(optimize_views(g, &params, &cfg, 2, &zero, 0), Err(Error::Config(_))));
    let huge = ViewOptions {
        budget: Some(1_000_000),
        ..ViewOptions::default()
    };
    assert!(matches!(optimize_views(g, &params, &cfg, 2, &huge, 0), Err(Error::Config(_))));
    assert!(matches!(optimize_views(g, &params, &cfg, 3, &ViewOptions::default(), 0), Err(Error::Config(_))));
}

fn check_views(g: &Graph, set: &ViewSet, budget: usize) {
    for (view, mask) in set.views.iter().zip(&set.masks) {
        assert!(validate_graph(view).is_empty());
        let same_bits = view.features.iter().zip(g.features.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits, "features changed");
        let flips = mask.discrete.as_ref().unwrap();
        let changed = view.adjacency.iter().zip(g.adjacency.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2 * flips.len());
        assert!(flips.len() <= budget);
        assert!(mask.theta.iter().all(|t| (0.0..=1.0).contains(t)));
    }
}

#[test]
fn views_preserve_features_and_respect_the_budget() {
    let ds = small_dataset(CausalVariant::B);
    let cfg = model_for(&ds, 2);
    let params = init_parameters(&cfg, LearningRates::default(), 5).unwrap();
    let g = &ds.train_graphs[1];
    for maker in [ViewMaker::Gradient, ViewMaker::GradientFlip, ViewMaker::RandomFlip] {
        let opts = ViewOptions {
            maker,
            steps: 10,
            ..ViewOptions::default()
        };
        let set = optimize_views(g, &params, &cfg, 2, &opts, 1).unwrap();
        check_views(g, &set, default_budget(g));
    }
}

#[test]
fn candidates_cover_edges_and_sampled_non_edges() {
    let ds = small_dataset(CausalVariant::A);
    let g = &ds.train_graphs[0];
    let pairs = candidate_pairs(g, 3, 9);
    let edges = g.edges();
    assert!(edges.iter().all(|e| pairs.contains(e)));
    assert_eq!(pairs.len(), edges.len() + 3 * g.num_nodes());
    let unique: std::collections::BTreeSet<_> = pairs.iter().collect();
    assert_eq!(unique.len(), pairs.len());
    assert!(pairs.iter().all(|&(i, j)| i < j));
    assert_eq!(candidate_pairs(g, 3, 9), pairs);
}

#[test]
fn views_after_stage_one_reach_their_targets() {
    let ds = generate_scm_dataset(&ScmConfig {
        causal_variant: CausalVariant::B,
        num_test_graphs: 1,
        ..ScmConfig::default()
    })
    .unwrap();
    let cfg = model_for(&ds, 2);
    let out = stage_one_train(&ds, &cfg, &StageOneConfig::default()).unwrap();
    let g = &ds.train_graphs[0];
    let set = optimize_views(g, &out.params, &cfg, 2, &ViewOptions::default(), 0).unwrap();
    check_views(g, &set, default_budget(g));
    let m0 = set.masks[0].discrete.as_ref().unwrap();
    let m1 = set.masks[1].discrete.as_ref().unwrap();
    assert_ne!(m0, m1, "the two views flip the same pairs");
    for t in 0..2 {
        let tr = set.trace.values(&format!("extrapolation_loss_{t}"));
        assert!(tr.last().unwrap() < &tr[0], "view {t} loss did not drop: {tr:?}");
    }
    let acc = view_env_accuracy(&set.views, &out.params, &cfg, 0).unwrap();
    assert!(acc >= 0.7, "environment accuracy of the views {acc}");
}
