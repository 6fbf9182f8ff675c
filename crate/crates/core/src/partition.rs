//! Stage one: adversarial environment partitioning.
//!
//! Each annealing iteration runs, in order:
//!
//! 1. `disentangle_iters` steps on `(u, d)` minimizing reconstruction plus
//!    `η`·HSIC against the current `Φ`;
//! 2. one epoch fitting `c_1..c_K` with `Φ` fixed;
//! 3. one step on `(Φ, c)` minimizing `R + λ·P_inv` with `u, w, c_k` fixed;
//! 4. one ascent step on `w` for the same objective, everything else fixed.
//!
//! `λ` ramps linearly from 0 over the first 30% of iterations.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, MultiGraphDataset};
use crate::nets::{
    forward_env_weights, init_parameters, Bound, EnvSource, GraphInput, LearningRates, ModelConfig,
    Nets, ParameterSet,
};
use crate::objectives;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierFit {
    /// Each `c_k` minimizes its `ρ`-weighted mean risk.
    Weighted,
    /// Each `c_k` minimizes the plain pooled risk.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOneConfig {
    pub annealing_iters: usize,
    pub disentangle_iters: usize,
    pub k: usize,
    pub lambda: f64,
    pub eta: f64,
    pub lr: LearningRates,
    /// Share of annealing iterations over which λ ramps up.
    pub warmup_fraction: f64,
    pub classifier_fit: ClassifierFit,
    /// Optimizer steps per `c_k` fitting epoch.
    pub env_fit_steps: usize,
    /// Verify after every step that frozen groups are bitwise unchanged.
    pub check_frozen: bool,
    pub seed: u64,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            annealing_iters: 50,
            disentangle_iters: 5,
            k: 2,
            lambda: 4.0,
            eta: 1.0,
            lr: LearningRates::default(),
            warmup_fraction: 0.3,
            classifier_fit: ClassifierFit::Weighted,
            env_fit_steps: 1,
            check_frozen: false,
            seed: 0,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.annealing_iters < 1 || self.disentangle_iters < 1 || self.env_fit_steps < 1 {
            return Err(Error::Config("stage-one iteration counts must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        if self.lambda < 0.0 || self.eta < 0.0 {
            return Err(Error::Config("λ and η must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// λ at annealing iteration `t`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        let ramp = (self.warmup_fraction * self.annealing_iters as f64).ceil();
        if ramp <= 0.0 {
            self.lambda
        } else {
            self.lambda * (t as f64 / ramp).min(1.0)
        }
    }
}

/// Training nodes pooled over a set of graphs.
#[derive(Debug, Clone)]
pub struct Pool<'a> {
    pub graphs: Vec<&'a Graph>,
    pub nodes: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl<'a> Pool<'a> {
    pub fn new(graphs: impl IntoIterator<Item = &'a Graph>, select: impl Fn(&Graph) -> Vec<usize>) -> Result<Self> {
        let graphs: Vec<&Graph> = graphs.into_iter().collect();
        let nodes: Vec<Vec<usize>> = graphs.iter().map(|g| select(g)).collect();
        let labels: Vec<usize> = graphs
            .iter()
            .zip(&nodes)
            .flat_map(|(g, idx)| idx.iter().map(move |&i| g.labels[i]))
            .collect();
        if labels.is_empty() {
            return Err(Error::Input("no training nodes in the training graphs".into()));
        }
        Ok(Self { graphs, nodes, labels })
    }

    pub fn train(ds: &'a MultiGraphDataset) -> Result<Self> {
        if ds.train_graphs.is_empty() {
            return Err(Error::Input("dataset has no training graphs".into()));
        }
        Self::new(ds.train_graphs.iter(), Graph::train_nodes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stack the pooled rows of a per-graph quantity.
    pub fn gather(&self, tape: &mut Tape, per_graph: &[Var]) -> Var {
        let parts: Vec<Var> = per_graph
            .iter()
            .zip(&self.nodes)
            .map(|(&v, idx)| tape.gather_rows(v, idx.clone()))
            .collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        }
    }

    pub fn features(&self, tape: &mut Tape) -> Var {
        let x: Vec<Var> = self.graphs.iter().map(|g| tape.constant(g.features.clone())).collect();
        self.gather(tape, &x)
    }
}

fn step_seed(base: u64, step: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64)
}

/// Pooled `Φ` rows.
pub fn pooled_phi(tape: &mut Tape, nets: &Nets, b: &Bound, pool: &Pool, seed: u64) -> Var {
    let per: Vec<Var> = pool
        .graphs
        .iter()
        .map(|g| {
            let gi = GraphInput::new(tape, g, seed);
            nets.phi(tape, b, gi)
        })
        .collect();
    pool.gather(tape, &per)
}

/// Pooled environment-classifier inputs.
pub fn pooled_env_features(tape: &mut Tape, nets: &Nets, b: &Bound, pool: &Pool, seed: u64) -> Var {
    let per: Vec<Var> = pool
        .graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let gi = GraphInput::new(tape, g, seed.wrapping_add(i as u64 * 7919));
            nets.env_features(tape, b, gi)
        })
        .collect();
    pool.gather(tape, &per)
}

pub fn pooled_rho(tape: &mut Tape, nets: &Nets, b: &Bound, pool: &Pool, seed: u64) -> Var {
    let h = pooled_env_features(tape, nets, b, pool, seed);
    let logits = nets.env_logits(tape, b, h);
    tape.softmax_rows(logits)
}

/// Per-node losses of `c` and of every `c_k` on pooled `Φ` rows.
pub fn head_losses(tape: &mut Tape, nets: &Nets, b: &Bound, phi: Var, labels: &[usize]) -> (Var, Vec<Var>) {
    let s = nets.classify(tape, b, "c", phi);
    let shared = objectives::node_ce(tape, s, labels);
    let envs = nets
        .cfg
        .classifier_groups()
        .iter()
        .map(|name| {
            let s = nets.classify(tape, b, name, phi);
            objectives::node_ce(tape, s, labels)
        })
        .collect();
    (shared, envs)
}

/// `R(c,Φ) + λ P_inv` on the pool, plus its two parts.
pub fn partition_loss(
    tape: &mut Tape,
    nets: &Nets,
    b: &Bound,
    pool: &Pool,
    lambda: f64,
    seed: u64,
) -> Result<(Var, Var, Var)> {
    let phi = pooled_phi(tape, nets, b, pool, seed);
    let rho = pooled_rho(tape, nets, b, pool, seed);
    let (shared, envs) = head_losses(tape, nets, b, phi, &pool.labels);
    let erm = tape.mean_all(shared);
    let pinv = objectives::invariance_penalty(tape, shared, &envs, rho)?;
    let ls = objectives::partition_objective(tape, erm, pinv, lambda);
    Ok((ls, erm, pinv))
}

/// Fingerprints of every group not in `trainable`.
fn frozen_snapshot(params: &ParameterSet, trainable: &[&str]) -> Vec<(String, Vec<u64>)> {
    params
        .names()
        .into_iter()
        .filter(|n| !trainable.contains(&n.as_str()))
        .map(|n| {
            let f = params.fingerprint(&n);
            (n, f)
        })
        .collect()
}

fn verify_frozen(params: &ParameterSet, snap: &[(String, Vec<u64>)], what: &str) -> Result<()> {
    for (name, f) in snap {
        if &params.fingerprint(name) != f {
            return Err(Error::Corrupt(format!(
                "frozen group `{name}` changed during {what}"
            )));
        }
    }
    Ok(())
}

/// Run one optimizer step on `trainable` for the loss built by `build`.
/// Returns the loss value before the step.
pub fn train_step<F>(
    params: &mut ParameterSet,
    trainable: &[&str],
    ascend: bool,
    check_frozen: bool,
    what: &str,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let snap = check_frozen.then(|| frozen_snapshot(params, trainable));
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, trainable);
    let loss = build(&mut tape, &b)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss);
    let g = params.collect_grads(&grads, &b, trainable);
    params.apply_grads(&g, ascend);
    if let Some(s) = snap {
        verify_frozen(params, &s, what)?;
    }
    Ok(value)
}

fn eval_loss<F>(params: &ParameterSet, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let l = build(&mut tape, &b)?;
    Ok(tape.scalar(l))
}

/// Gradient ascent on `w` that never lowers the objective: the step is
/// halved until the objective does not decrease, or dropped.
fn ascend_w<F>(params: &mut ParameterSet, check_frozen: bool, build: F) -> Result<(f64, f64)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let snap = check_frozen.then(|| frozen_snapshot(params, &["w"]));
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &["w"]);
    let loss = build(&mut tape, &b)?;
    let before = tape.scalar(loss);
    let grads = tape.backward(loss);
    let g = params.collect_grads(&grads, &b, &["w"]);
    let original = params.arrays("w").to_vec();
    let lr = params.group("w").expect("w group").optimizer.lr;
    let mut after = before;
    let mut scale = 1.0;
    for _ in 0..12 {
        let stepped: Vec<Array2<f64>> = original
            .iter()
            .zip(&g["w"])
            .map(|(a, gr)| a + &(gr * (lr * scale)))
            .collect();
        params.group_mut("w").unwrap().arrays = stepped;
        after = eval_loss(params, &build)?;
        if after >= before {
            break;
        }
        scale *= 0.5;
    }
    if after < before {
        params.group_mut("w").unwrap().arrays = original;
        after = before;
    }
    if let Some(s) = snap {
        verify_frozen(params, &s, "the w ascent step")?;
    }
    Ok((before, after))
}

#[derive(Debug, Clone)]
pub struct StageOneOutput {
    pub params: ParameterSet,
    /// Final `ρ` per training graph, over all of its nodes.
    pub rho: Vec<Array2<f64>>,
    pub trace: Trace,
}

/// Stage one from fresh parameters.
pub fn stage_one_train(ds: &MultiGraphDataset, model: &ModelConfig, cfg: &StageOneConfig) -> Result<StageOneOutput> {
    let params = init_parameters(model, cfg.lr, cfg.seed)?;
    stage_one_from(ds, model, cfg, params)
}

/// Stage one continuing from given parameters.
pub fn stage_one_from(
    ds: &MultiGraphDataset,
    model: &ModelConfig,
    cfg: &StageOneConfig,
    params: ParameterSet,
) -> Result<StageOneOutput> {
    stage_one_observed(ds, model, cfg, params, &mut |_, _| Ok(()))
}

/// Stage one calling `observer(t, params)` after every annealing iteration.
/// The observer sees the parameters read-only and cannot alter training.
pub fn stage_one_observed(
    ds: &MultiGraphDataset,
    model: &ModelConfig,
    cfg: &StageOneConfig,
    mut params: ParameterSet,
    observer: &mut dyn FnMut(usize, &ParameterSet) -> Result<()>,
) -> Result<StageOneOutput> {
    cfg.validate()?;
    model.validate()?;
    if model.num_envs != cfg.k {
        return Err(Error::Config(format!(
            "stage one K={} but the model has {} environments",
            cfg.k, model.num_envs
        )));
    }
    let pool = Pool::train(ds)?;
    let nets = Nets::new(model);
    let mut trace = Trace::new();
    let learned_env = model.env_source == EnvSource::Learned;
    let env_groups: Vec<String> = model.classifier_groups();
    let env_refs: Vec<&str> = env_groups.iter().map(String::as_str).collect();
    let fc = cfg.check_frozen;

    for t in 0..cfg.annealing_iters {
        let lambda = cfg.lambda_at(t);
        let seed = step_seed(cfg.seed, t);
        trace.push(t, "lambda", lambda);

        // (i) disentanglement on (u, d)
        if learned_env {
            for j in 0..cfg.disentangle_iters {
                let v = train_step(&mut params, &["u", "d"], false, fc, "disentanglement", |tape, b| {
                    let phi = pooled_phi(tape, &nets, b, &pool, seed);
                    let he = pooled_env_features(tape, &nets, b, &pool, seed);
                    let x = pool.features(tape);
                    let rec = nets.reconstruct(tape, b, he, phi);
                    objectives::disentangle_loss(tape, rec, x, he, phi, cfg.eta)
                })?;
                trace.push_checked(t * cfg.disentangle_iters + j, "disentangle", v)?;
            }
        }

        // (ii) environment classifiers with Φ fixed
        let (phi_val, rho_val) = {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, &[]);
            let phi = pooled_phi(&mut tape, &nets, &b, &pool, seed);
            let rho = pooled_rho(&mut tape, &nets, &b, &pool, seed);
            (tape.value(phi).clone(), tape.value(rho).clone())
        };
        for _ in 0..cfg.env_fit_steps {
            let v = train_step(&mut params, &env_refs, false, fc, "classifier fitting", |tape, b| {
                let phi = tape.constant(phi_val.clone());
                let rho = tape.constant(rho_val.clone());
                let envs: Vec<Var> = env_refs
                    .iter()
                    .map(|name| {
                        let s = nets.classify(tape, b, name, phi);
                        objectives::node_ce(tape, s, &pool.labels)
                    })
                    .collect();
                env_fit_loss(tape, &envs, rho, cfg.classifier_fit)
            })?;
            trace.push_checked(t, "env_risk", v)?;
        }

        // (iii) min-step on (Φ, c)
        let mut parts = (0.0, 0.0);
        let v = train_step(&mut params, &["phi", "c"], false, fc, "the (phi, c) step", |tape, b| {
            let (ls, _, _) = partition_loss(tape, &nets, b, &pool, lambda, seed)?;
            Ok(ls)
        })?;
        trace.push_checked(t, "ls", v)?;
        {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, &[]);
            let (_, erm, pinv) = partition_loss(&mut tape, &nets, &b, &pool, lambda, seed)?;
            parts.0 = tape.scalar(erm);
            parts.1 = tape.scalar(pinv);
        }
        trace.push_checked(t, "erm", parts.0)?;
        trace.push_checked(t, "penalty", parts.1)?;

        // (iv) max-step on w
        let (before, after) = ascend_w(&mut params, fc, |tape, b| {
            let (ls, _, _) = partition_loss(tape, &nets, b, &pool, lambda, seed)?;
            Ok(ls)
        })?;
        trace.push_checked(t, "ls_before_max", before)?;
        trace.push_checked(t, "ls_after_max", after)?;
        observer(t, &params)?;
    }

    let rho = ds
        .train_graphs
        .iter()
        .enumerate()
        .map(|(i, g)| forward_env_weights(&params, model, g, cfg.k, step_seed(cfg.seed, cfg.annealing_iters).wrapping_add(i as u64 * 7919)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StageOneOutput { params, rho, trace })
}

fn env_fit_loss(tape: &mut Tape, envs: &[Var], rho: Var, fit: ClassifierFit) -> Result<Var> {
    let mut acc = tape.scalar_const(0.0);
    let totals = tape.value(rho).sum_axis(Axis(0));
    for (k, &l) in envs.iter().enumerate() {
        let term = match fit {
            ClassifierFit::Unweighted => tape.mean_all(l),
            ClassifierFit::Weighted => {
                if totals[k] < objectives::EMPTY_ENV_WEIGHT {
                    continue;
                }
                let col = objectives::column(tape, rho, k);
                let w = tape.mul(col, l);
                let s = tape.sum_all(w);
                tape.scale(s, 1.0 / totals[k])
            }
        };
        acc = tape.add(acc, term);
    }
    Ok(acc)
}

/// Agreement between inferred and true environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    /// Fraction of nodes whose inferred environment maps to their true one
    /// under the best one-to-one matching.
    pub agreement: f64,
    /// Nodes per inferred environment (argmax of ρ).
    pub sizes: Vec<usize>,
    pub empty_envs: Vec<usize>,
    /// `mapping[k]` is the true environment matched to inferred `k`, if any.
    pub mapping: Vec<Option<usize>>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn env_partition_report(rho: &Array2<f64>, truth: &[usize]) -> Result<PartitionReport> {
    if rho.nrows() != truth.len() {
        return Err(Error::Shape(format!(
            "{} assignment rows against {} labels",
            rho.nrows(),
            truth.len()
        )));
    }
    let k = rho.ncols();
    let kt = truth.iter().copied().max().map_or(0, |m| m + 1);
    let m = k.max(kt);
    if m > 8 {
        return Err(Error::Config(format!("matching over {m} environments is too large")));
    }
    let inferred: Vec<usize> = rho
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
                .0
        })
        .collect();
    let mut confusion = vec![vec![0usize; m]; m];
    let mut sizes = vec![0usize; k];
    for (&a, &t) in inferred.iter().zip(truth) {
        confusion[a][t] += 1;
        sizes[a] += 1;
    }
    let mut best = (0usize, Vec::new());
    for p in permutations(m) {
        let score: usize = (0..m).map(|a| confusion[a][p[a]]).sum();
        if score > best.0 || best.1.is_empty() {
            best = (score, p);
        }
    }
    let mapping = (0..k)
        .map(|a| Some(best.1[a]).filter(|&t| t < kt))
        .collect();
    Ok(PartitionReport {
        agreement: best.0 as f64 / truth.len().max(1) as f64,
        empty_envs: (0..k).filter(|&a| sizes[a] == 0).collect(),
        sizes,
        mapping,
    })
}
