use iene_core::datagen::{generate_scm_dataset, CausalVariant, ScmConfig};
use iene_core::pipeline::*;
use iene_core::trace::Trace;
use iene_core::{Error, MultiGraphDataset};

fn small(seed: u64) -> MultiGraphDataset {
    generate_scm_dataset(&ScmConfig {
        num_nodes: 150,
        causal_variant: CausalVariant::B,
        num_test_graphs: 2,
        seed,
        ..ScmConfig::default()
    })
    .unwrap()
}

fn quick(method: Method) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        ..RunConfig::default()
    };
    cfg.stage_one.annealing_iters = 8;
    cfg.stage_one.disentangle_iters = 2;
    cfg.stage_two.training_iters = 12;
    cfg.stage_two.refresh_every = 5;
    cfg.stage_two.views.steps = 5;
    cfg
}

#[test]
fn identical_configs_give_identical_results() {
    let ds = small(0);
    for method in Method::ALL {
        let cfg = quick(method);
        let a = run(&cfg, &ds).unwrap();
        let b = run(&cfg, &ds).unwrap();
        assert!(a.same_outcome(&b), "{method}");
        assert_eq!(a.trace.to_ndjson(), b.trace.to_ndjson(), "{method}");
    }
}

#[test]
fn outputs_are_written_and_readable() {
    let ds = small(1);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Method::IeneRe);
    cfg.out_dir = Some(dir.path().join("run"));
    let r = run(&cfg, &ds).unwrap();
    let out = dir.path().join("run");
    for f in ["result.json", "trace.ndjson", "checkpoint/manifest.json", "stage_one/manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let mut back = RunResult::read(&out.join("result.json")).unwrap();
    assert_eq!(back.config_hash, cfg.hash());
    let text = std::fs::read_to_string(out.join("trace.ndjson")).unwrap();
    back.trace = Trace::parse_ndjson(&text).unwrap();
    assert!(r.same_outcome(&back));
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn atomic_write_replaces_whole_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.json");
    write_atomic(&p, "first").unwrap();
    write_atomic(&p, "second").unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "second");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn iene_r_is_the_first_phase_of_iene_re() {
    let ds = small(2);
    let r = run(&quick(Method::IeneR), &ds).unwrap();
    let re = run(&quick(Method::IeneRe), &ds).unwrap();
    let n = r.trace.records.len();
    assert!(n > 0 && re.trace.records.len() > n);
    assert_eq!(r.trace.records[..], re.trace.records[..n]);
    assert_eq!(r.partition, re.partition);
}

#[test]
fn iene_e_needs_its_stage_one_checkpoint() {
    let ds = small(3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Method::IeneE);
    cfg.stage_one_checkpoint = Some(dir.path().join("nothing_here"));
    assert!(matches!(run(&cfg, &ds), Err(Error::Dependency(_))));

    let mut pre = quick(Method::IeneRe);
    pre.out_dir = Some(dir.path().join("pre"));
    let first = run(&pre, &ds).unwrap();
    cfg.stage_one_checkpoint = Some(dir.path().join("pre/stage_one"));
    let loaded = run(&cfg, &ds).unwrap();
    assert_eq!(loaded.partition, first.partition);
    let trained = run(&quick(Method::IeneE), &ds).unwrap();
    assert_eq!(trained.test, loaded.test);
}

#[test]
fn selected_checkpoint_is_at_least_as_good_as_the_last() {
    let ds = small(4);
    for method in Method::ALL {
        let r = run(&quick(method), &ds).unwrap();
        let last = *r.trace.values("val").last().unwrap_or(&f64::NEG_INFINITY);
        assert!(r.val_score >= last, "{method}: selected {} final {last}", r.val_score);
        assert!(r.best_iter < r.iterations);
    }
}

#[test]
fn early_stopping_respects_patience() {
    let ds = small(5);
    let mut cfg = quick(Method::Erm);
    cfg.stage_two.training_iters = 200;
    cfg.patience = 3;
    let r = run(&cfg, &ds).unwrap();
    assert!(r.iterations <= r.best_iter + 3 + 1, "{} iterations, best {}", r.iterations, r.best_iter);
}

#[test]
fn frozen_groups_stay_frozen() {
    let ds = small(6);
    for method in [Method::IeneE, Method::IeneRe] {
        let mut cfg = quick(method);
        cfg.check_frozen = true;
        run(&cfg, &ds).unwrap();
    }
}

#[test]
fn erm_leans_on_the_flipped_cue() {
    let ds = generate_scm_dataset(&ScmConfig {
        causal_variant: CausalVariant::A,
        num_test_graphs: 3,
        ..ScmConfig::default()
    })
    .unwrap();
    let r = run(
        &RunConfig {
            method: Method::Erm,
            ..RunConfig::default()
        },
        &ds,
    )
    .unwrap();
    assert!(
        r.train_score - r.test.mean >= 0.20,
        "train {} test {}",
        r.train_score,
        r.test.mean
    );
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small(0);
    let mut cfg = quick(Method::Erm);
    cfg.patience = 0;
    assert!(matches!(run(&cfg, &ds), Err(Error::Config(_))));
    assert!(matches!(with_override(&quick(Method::Erm), "stage_two.nope", "1"), Err(Error::Config(_))));
    let over = with_override(&quick(Method::Erm), "stage_two.beta", "3.5").unwrap();
    assert_eq!(over.stage_two.beta, 3.5);
}
