//! Full training runs: ERM, V-REx, and the three IENE variants, with
//! validation-based model selection, checkpoints and result files.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricReport};
use crate::extrapolate::{optimize_views, ViewOptions, ViewSet};
use crate::graph::{dataset_hash, Graph, MultiGraphDataset};
use crate::nets::{
    forward_env_weights, init_parameters, load_checkpoint, save_checkpoint, EncoderConfig, GraphInput,
    LearningRates, ModelConfig, Nets, ParameterSet,
};
use crate::objectives::{self, VariancePenalty};
use crate::partition::{
    env_partition_report, head_losses, pooled_phi, stage_one_observed, train_step, PartitionReport, Pool,
    StageOneConfig,
};
use crate::trace::Trace;

/// Seed for every forward pass used in evaluation.
pub const EVAL_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Vrex,
    IeneR,
    IeneE,
    IeneRe,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Erm, Method::Vrex, Method::IeneR, Method::IeneE, Method::IeneRe];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Vrex => "vrex",
            Method::IeneR => "iene_r",
            Method::IeneE => "iene_e",
            Method::IeneRe => "iene_re",
        }
    }

    fn uses_stage_one(self) -> bool {
        matches!(self, Method::IeneR | Method::IeneE | Method::IeneRe)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTwoConfig {
    /// Outer iterations for stage two, and for the erm and vrex baselines.
    pub training_iters: usize,
    /// Weight of the variance penalty, both over views and in the vrex
    /// baseline.
    pub beta: f64,
    pub penalty: VariancePenalty,
    /// Views are re-optimized every this many outer iterations.
    pub refresh_every: usize,
    /// `views.steps` is the number of intervention steps per refresh.
    pub views: ViewOptions,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            training_iters: 200,
            beta: 1.0,
            penalty: VariancePenalty::Nvrex,
            refresh_every: 10,
            views: ViewOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub lr: LearningRates,
    /// The run seed replaces `stage_one.seed`.
    pub stage_one: StageOneConfig,
    pub stage_two: StageTwoConfig,
    /// Outer iterations without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Where result, checkpoints and traces go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Pretrained recognizer for iene_e. When unset, stage one runs first.
    pub stage_one_checkpoint: Option<PathBuf>,
    /// Assert after every step that frozen groups did not change.
    pub check_frozen: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::IeneRe,
            encoder: EncoderConfig::default(),
            head_hidden: 32,
            lr: LearningRates::default(),
            stage_one: StageOneConfig::default(),
            stage_two: StageTwoConfig::default(),
            patience: 20,
            seed: 0,
            out_dir: None,
            stage_one_checkpoint: None,
            check_frozen: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.stage_two.training_iters < 1 || self.stage_two.refresh_every < 1 {
            return Err(Error::Config("stage-two iteration counts must be at least 1".into()));
        }
        if self.stage_two.beta < 0.0 {
            return Err(Error::Config("β must be non-negative".into()));
        }
        self.encoder.validate()?;
        self.effective_stage_one().validate()
    }

    pub fn effective_stage_one(&self) -> StageOneConfig {
        StageOneConfig {
            seed: self.seed,
            lr: self.lr,
            check_frozen: self.check_frozen || self.stage_one.check_frozen,
            ..self.stage_one.clone()
        }
    }

    pub fn model(&self, ds: &MultiGraphDataset) -> ModelConfig {
        let mut m = ModelConfig::new(self.encoder.clone(), ds.feature_dim(), ds.num_classes(), self.stage_one.k);
        m.head_hidden = self.head_hidden;
        m
    }

    /// Hash of the resolved config; the output directory is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Set the dotted `key` of a JSON tree to `raw`, which is read as JSON when
/// it parses and as a plain string otherwise. The key must already exist.
pub fn set_dotted(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            serde_json::Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        };
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok(())
}

/// A copy of `cfg` with one dotted override applied.
pub fn with_override(cfg: &RunConfig, key: &str, raw: &str) -> Result<RunConfig> {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    set_dotted(&mut v, key, raw)?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("`{key}={raw}`: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub test: MetricReport,
    pub val_score: f64,
    pub train_score: f64,
    /// Outer iteration of the selected parameters.
    pub best_iter: usize,
    pub iterations: usize,
    /// Inferred-environment agreement with the true environments, when the
    /// method infers environments and the training graphs carry env ids.
    pub partition: Option<PartitionReport>,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub trace: Trace,
    #[serde(skip)]
    pub params: Option<ParameterSet>,
}

impl RunResult {
    /// Everything except wall-clock time and in-memory payloads.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let strip = |r: &RunResult| RunResult {
            wall_clock_secs: 0.0,
            params: None,
            ..r.clone()
        };
        strip(self) == strip(other) && self.trace == other.trace
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Write `text` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn step_seed(base: u64, step: usize) -> u64 {
    base.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(step as u64)
}

/// Mean validation score over the validation graphs.
fn validation_score(params: &ParameterSet, model: &ModelConfig, ds: &MultiGraphDataset) -> Result<f64> {
    let graphs: Vec<(&Graph, &[bool])> = if ds.val_graphs.is_empty() {
        ds.train_graphs.iter().map(|g| (g, g.val_mask.as_slice())).collect()
    } else {
        ds.val_graphs.iter().map(|g| (g, g.val_mask.as_slice())).collect()
    };
    let mut total = 0.0;
    for (g, mask) in &graphs {
        total += evalkit::score_graph(params, model, g, mask, ds.metric, EVAL_SEED)?;
    }
    Ok(total / graphs.len() as f64)
}

fn train_score(params: &ParameterSet, model: &ModelConfig, ds: &MultiGraphDataset) -> Result<f64> {
    let mut total = 0.0;
    for g in &ds.train_graphs {
        total += evalkit::score_graph(params, model, g, &g.train_mask, ds.metric, EVAL_SEED)?;
    }
    Ok(total / ds.train_graphs.len() as f64)
}

/// Keeps the parameters with the best validation score seen so far.
struct Selector {
    best: Option<(f64, usize, ParameterSet)>,
    last_improvement: usize,
}

impl Selector {
    fn new() -> Self {
        Self {
            best: None,
            last_improvement: 0,
        }
    }

    fn offer(&mut self, t: usize, score: f64, params: &ParameterSet) {
        let better = match &self.best {
            None => true,
            Some((b, _, _)) => score > *b,
        };
        if better {
            self.best = Some((score, t, params.clone()));
            self.last_improvement = t;
        }
    }

    fn should_stop(&self, t: usize, patience: usize) -> bool {
        t >= self.last_improvement + patience
    }
}

/// Per-node training losses of `c(Φ)` on one graph.
fn graph_losses(tape: &mut Tape, nets: &Nets, b: &crate::nets::Bound, g: &Graph, nodes: &[usize], seed: u64) -> Var {
    let gi = GraphInput::new(tape, g, seed);
    let h = nets.phi(tape, b, gi);
    let s = nets.classify(tape, b, "c", h);
    let sel = tape.gather_rows(s, nodes.to_vec());
    let labels: Vec<usize> = nodes.iter().map(|&i| g.labels[i]).collect();
    objectives::node_ce(tape, sel, &labels)
}

enum Objective<'a> {
    Erm,
    Vrex,
    /// Stage two: ERM on the original graphs, `λ·P_inv` with frozen `c_k`
    /// and fixed `ρ` (when `rho` is set), and the multi-view term.
    StageTwo {
        rho: Option<&'a Array2<f64>>,
        lambda: f64,
        views: &'a [ViewSet],
    },
}

fn build_loss(
    tape: &mut Tape,
    b: &crate::nets::Bound,
    nets: &Nets,
    pool: &Pool,
    cfg: &RunConfig,
    obj: &Objective,
    seed: u64,
) -> Result<Var> {
    match obj {
        Objective::Erm => {
            let phi = pooled_phi(tape, nets, b, pool, seed);
            let s = nets.classify(tape, b, "c", phi);
            let l = objectives::node_ce(tape, s, &pool.labels);
            Ok(tape.mean_all(l))
        }
        Objective::Vrex => {
            let means: Vec<Var> = pool
                .graphs
                .iter()
                .zip(&pool.nodes)
                .map(|(g, idx)| {
                    let l = graph_losses(tape, nets, b, g, idx, seed);
                    tape.mean_all(l)
                })
                .collect();
            if means.len() < 2 {
                return Err(Error::Config("the vrex baseline needs at least two training graphs".into()));
            }
            let row = tape.concat_cols(&means);
            let erm = tape.mean_all(row);
            let v = objectives::vrex(tape, row)?;
            let v = tape.scale(v, cfg.stage_two.beta);
            Ok(tape.add(erm, v))
        }
        Objective::StageTwo { rho, lambda, views } => {
            let phi = pooled_phi(tape, nets, b, pool, seed);
            let (shared, envs) = head_losses(tape, nets, b, phi, &pool.labels);
            let erm = tape.mean_all(shared);
            let pen = match rho {
                Some(r) if *lambda > 0.0 => {
                    let r = tape.constant((*r).clone());
                    objectives::invariance_penalty(tape, shared, &envs, r)?
                }
                _ => tape.scalar_const(0.0),
            };
            let k = views.first().map_or(0, |v| v.views.len());
            let mut per_view = Vec::with_capacity(k);
            for j in 0..k {
                let parts: Vec<Var> = views
                    .iter()
                    .zip(&pool.nodes)
                    .map(|(vs, idx)| graph_losses(tape, nets, b, &vs.views[j], idx, seed))
                    .collect();
                per_view.push(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) });
            }
            let dynamic = objectives::dynamic_objective(tape, &per_view, cfg.stage_two.beta, cfg.stage_two.penalty)?;
            Ok(objectives::combined_objective(tape, erm, pen, dynamic, *lambda))
        }
    }
}

/// Pooled `ρ` rows of the training nodes under frozen `u, w`.
fn pooled_rho_value(params: &ParameterSet, model: &ModelConfig, pool: &Pool, k: usize) -> Result<Array2<f64>> {
    let parts = pool
        .graphs
        .iter()
        .zip(&pool.nodes)
        .map(|(g, idx)| Ok(forward_env_weights(params, model, g, k, EVAL_SEED)?.select(Axis(0), idx)))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn partition_of(params: &ParameterSet, model: &ModelConfig, ds: &MultiGraphDataset, k: usize) -> Result<Option<PartitionReport>> {
    if ds.train_graphs.iter().any(|g| g.env_id.is_none()) {
        return Ok(None);
    }
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for g in &ds.train_graphs {
        rows.push(forward_env_weights(params, model, g, k, EVAL_SEED)?);
        truth.extend(std::iter::repeat_n(g.env_id.unwrap(), g.num_nodes()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let rho = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    env_partition_report(&rho, &truth).map(Some)
}

/// Outer training loop on `(Φ, c)` with early stopping on validation.
#[allow(clippy::too_many_arguments)]
fn outer_loop(
    params: &mut ParameterSet,
    ds: &MultiGraphDataset,
    model: &ModelConfig,
    cfg: &RunConfig,
    pool: &Pool,
    rho: Option<&Array2<f64>>,
    lambda: f64,
    with_views: bool,
    trace: &mut Trace,
    selector: &mut Selector,
    step_offset: usize,
) -> Result<usize> {
    let nets = Nets::new(model);
    let mut views: Vec<ViewSet> = Vec::new();
    let mut done = 0;
    for t in 0..cfg.stage_two.training_iters {
        let seed = step_seed(cfg.seed, step_offset + t);
        if with_views && t % cfg.stage_two.refresh_every == 0 {
            views = pool
                .graphs
                .iter()
                .enumerate()
                .map(|(i, g)| optimize_views(g, params, model, model.num_envs, &cfg.stage_two.views, seed.wrapping_add(i as u64 * 104_729)))
                .collect::<Result<Vec<_>>>()?;
            for vs in &views {
                for r in &vs.trace.records {
                    trace.push(step_offset + t, &r.name, r.value);
                }
            }
        }
        let obj = if with_views {
            Objective::StageTwo {
                rho,
                lambda,
                views: &views,
            }
        } else if cfg.method == Method::Vrex {
            Objective::Vrex
        } else {
            Objective::Erm
        };
        let v = train_step(params, &["phi", "c"], false, cfg.check_frozen, "the stage-two step", |tape, b| {
            build_loss(tape, b, &nets, pool, cfg, &obj, seed)
        })?;
        trace.push_checked(step_offset + t, "loss", v)?;
        let val = validation_score(params, model, ds)?;
        trace.push(step_offset + t, "val", val);
        selector.offer(step_offset + t, val, params);
        done = t + 1;
        if selector.should_stop(step_offset + t, cfg.patience) {
            break;
        }
    }
    Ok(done)
}

/// Train one method on `ds` and evaluate the validation-selected
/// parameters on every test graph.
pub fn run(cfg: &RunConfig, ds: &MultiGraphDataset) -> Result<RunResult> {
    cfg.validate()?;
    ds.validate()?;
    let start = Instant::now();
    let model = cfg.model(ds);
    model.validate()?;
    let s1 = cfg.effective_stage_one();
    let pool = Pool::train(ds)?;
    let mut trace = Trace::new();
    let mut selector = Selector::new();
    let mut params = init_parameters(&model, cfg.lr, cfg.seed)?;
    let mut iterations = 0;
    let mut partition = None;

    if cfg.method.uses_stage_one() {
        let loaded = match (&cfg.stage_one_checkpoint, cfg.method) {
            (Some(path), Method::IeneE) => {
                if !path.join("manifest.json").exists() {
                    return Err(Error::Dependency(format!(
                        "stage-one checkpoint {} not found",
                        path.display()
                    )));
                }
                Some(load_checkpoint(path, &model, cfg.lr)?)
            }
            _ => None,
        };
        let stage_one_params = match loaded {
            Some(p) => p,
            None => {
                let track = cfg.method == Method::IeneR;
                let out = stage_one_observed(ds, &model, &s1, params.clone(), &mut |t, p| {
                    if track {
                        let val = validation_score(p, &model, ds)?;
                        selector.offer(t, val, p);
                    }
                    Ok(())
                })?;
                trace.extend(&out.trace);
                iterations += s1.annealing_iters;
                out.params
            }
        };
        partition = partition_of(&stage_one_params, &model, ds, s1.k)?;
        if let Some(dir) = &cfg.out_dir {
            save_checkpoint(&dir.join("stage_one"), &model, &stage_one_params)?;
        }
        match cfg.method {
            Method::IeneR => {}
            Method::IeneE => {
                // fresh Φ and c; only the recognizer carries over
                let fresh = params;
                params = stage_one_params;
                params.replace_group("phi", fresh.arrays("phi").to_vec())?;
                params.replace_group("c", fresh.arrays("c").to_vec())?;
                let offset = iterations;
                iterations += outer_loop(&mut params, ds, &model, cfg, &pool, None, 0.0, true, &mut trace, &mut selector, offset)?;
            }
            Method::IeneRe => {
                params = stage_one_params;
                let rho = pooled_rho_value(&params, &model, &pool, s1.k)?;
                let offset = iterations;
                iterations += outer_loop(&mut params, ds, &model, cfg, &pool, Some(&rho), s1.lambda, true, &mut trace, &mut selector, offset)?;
            }
            _ => unreachable!(),
        }
    } else {
        iterations += outer_loop(&mut params, ds, &model, cfg, &pool, None, 0.0, false, &mut trace, &mut selector, 0)?;
    }

    let (val_score, best_iter, best) = selector
        .best
        .take()
        .ok_or_else(|| Error::Config("no training iterations ran".into()))?;
    let test = evalkit::evaluate_multi_graph(&best, &model, ds, EVAL_SEED)?;
    let result = RunResult {
        method: cfg.method,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        dataset_hash: dataset_hash(ds),
        test,
        val_score,
        train_score: train_score(&best, &model, ds)?,
        best_iter,
        iterations,
        partition,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        trace,
        params: Some(best),
    };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &model, &result)?;
    }
    Ok(result)
}

fn write_outputs(dir: &Path, model: &ModelConfig, r: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(p) = &r.params {
        save_checkpoint(&dir.join("checkpoint"), model, p)?;
    }
    write_atomic(&dir.join("trace.ndjson"), &r.trace.to_ndjson())?;
    let text = serde_json::to_string_pretty(r).expect("result serializes");
    write_atomic(&dir.join("result.json"), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_override_sets_nested_values() {
        let c = with_override(&RunConfig::default(), "stage_two.beta", "0.5").unwrap();
        assert_eq!(c.stage_two.beta, 0.5);
        let c = with_override(&c, "method", "erm").unwrap();
        assert_eq!(c.method, Method::Erm);
        let c = with_override(&c, "stage_two.views.budget", "7").unwrap();
        assert_eq!(c.stage_two.views.budget, Some(7));
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        assert!(matches!(
            with_override(&RunConfig::default(), "stage_two.gamma", "1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: Some("x".into()),
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 3, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
