//! Structural interventions that push a graph toward inferred environments.
//!
//! A view flips a budgeted set of node pairs: `Â = A + (E − I − 2A) ∘ S`.
//! The relaxed mask `θ ∈ [0,1]` lives only on candidate pairs (all edges
//! plus sampled non-edges) and is optimized so that the frozen environment
//! recognizer `w(u(·))` assigns view `k` to environment `k`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{GraphInput, ModelConfig, Nets, ParameterSet, Structure};
use crate::objectives;
use crate::trace::Trace;

pub const THETA_INIT: f64 = 0.01;

/// Relaxed and discrete intervention on one graph, stored on candidate
/// pairs `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionMask {
    pub num_nodes: usize,
    pub pairs: Vec<(usize, usize)>,
    pub theta: Vec<f64>,
    pub budget: usize,
    /// Pairs flipped after discretization.
    pub discrete: Option<Vec<(usize, usize)>>,
}

impl InterventionMask {
    pub fn new(num_nodes: usize, pairs: Vec<(usize, usize)>, budget: usize) -> Self {
        let theta = vec![THETA_INIT; pairs.len()];
        Self {
            num_nodes,
            pairs,
            theta,
            budget,
            discrete: None,
        }
    }

    pub fn theta_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.num_nodes, self.num_nodes));
        for (&(i, j), &t) in self.pairs.iter().zip(&self.theta) {
            m[[i, j]] = t;
            m[[j, i]] = t;
        }
        m
    }

    pub fn discrete_matrix(&self) -> Option<Array2<f64>> {
        self.discrete.as_ref().map(|flips| {
            let mut s = Array2::zeros((self.num_nodes, self.num_nodes));
            for &(i, j) in flips {
                s[[i, j]] = 1.0;
                s[[j, i]] = 1.0;
            }
            s
        })
    }

    /// Keep the `budget` largest entries of θ; ties are ordered by a seeded
    /// shuffle.
    pub fn discretize(&mut self, seed: u64) {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.sort_by(|&a, &b| self.theta[b].total_cmp(&self.theta[a]));
        let mut flips: Vec<(usize, usize)> = order
            .into_iter()
            .take(self.budget)
            .map(|i| self.pairs[i])
            .collect();
        flips.sort_unstable();
        self.discrete = Some(flips);
    }
}

/// `A + (E − I − 2A) ∘ S` for a binary, symmetric, zero-diagonal `S`.
pub fn apply_structural_intervention(a: &Array2<f64>, s: &Array2<f64>) -> Result<Array2<f64>> {
    if a.dim() != s.dim() || a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("A {:?} against S {:?}", a.dim(), s.dim())));
    }
    let n = a.nrows();
    for i in 0..n {
        if s[[i, i]] != 0.0 {
            return Err(Error::Input(format!("S has a nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let v = s[[i, j]];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Input(format!("S is not binary at ({i},{j}): {v}")));
            }
            if v != s[[j, i]] {
                return Err(Error::Input(format!("S is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(relaxed_view(a, s))
}

/// `A + (E − I − 2A) ∘ θ`.
pub fn relaxed_view(a: &Array2<f64>, theta: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let e = if i == j { 0.0 } else { 1.0 };
        a[[i, j]] + (e - 2.0 * a[[i, j]]) * theta[[i, j]]
    })
}

/// Relaxed view on a tape, differentiable in the `1×m` candidate row `theta`.
pub fn relaxed_view_tape(tape: &mut Tape, a: &Array2<f64>, theta: Var, pairs: &[(usize, usize)]) -> Var {
    let n = a.nrows();
    let coef = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            1.0 - 2.0 * a[[i, j]]
        }
    });
    let s = tape.scatter_sym(theta, pairs.to_vec(), n);
    let coef = tape.constant(coef);
    let delta = tape.mul(coef, s);
    let base = tape.constant(a.clone());
    tape.add(base, delta)
}

/// All edges plus `num_sample × N` distinct uniformly drawn non-edges.
pub fn candidate_pairs(g: &Graph, num_sample: usize, seed: u64) -> Vec<(usize, usize)> {
    let n = g.num_nodes();
    let mut pairs = g.edges();
    let non_edges = n * (n.saturating_sub(1)) / 2 - pairs.len();
    let want = (num_sample * n).min(non_edges);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = std::collections::BTreeSet::new();
    if want * 2 > non_edges {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| g.adjacency[[i, j]] == 0.0)
            .collect();
        all.shuffle(&mut rng);
        chosen.extend(all.into_iter().take(want));
    } else {
        while chosen.len() < want {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j && g.adjacency[[i, j]] == 0.0 {
                chosen.insert((i.min(j), i.max(j)));
            }
        }
    }
    pairs.extend(chosen);
    pairs
}

/// 5% of the edge count, at least one.
pub fn default_budget(g: &Graph) -> usize {
    ((g.num_edges() as f64) * 0.05).round().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMaker {
    /// Projected gradient steps on θ, then top-B thresholding.
    Gradient,
    /// One gradient evaluation at θ = 0.01, flip the top-B entries.
    GradientFlip,
    /// Uniformly random budgeted flips among candidates.
    RandomFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewOptions {
    pub steps: usize,
    /// Flips per view; `None` means 5% of the graph's edges.
    pub budget: Option<usize>,
    pub num_sample: usize,
    /// Largest per-step change of any θ entry.
    pub step_size: f64,
    pub maker: ViewMaker,
}

impl Default for ViewOptions {
    fn default() -> Self {
        Self {
            steps: 30,
            budget: None,
            num_sample: 3,
            step_size: 0.1,
            maker: ViewMaker::Gradient,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub views: Vec<Graph>,
    pub masks: Vec<InterventionMask>,
    pub trace: Trace,
}

fn target_nodes(g: &Graph) -> Vec<usize> {
    let t = g.train_nodes();
    if t.is_empty() {
        (0..g.num_nodes()).collect()
    } else {
        t
    }
}

/// Extrapolation loss of one relaxed view toward `target`, and its
/// gradient in θ.
fn view_loss_and_grad(
    g: &Graph,
    nodes: &[usize],
    params: &ParameterSet,
    cfg: &ModelConfig,
    mask: &InterventionMask,
    target: usize,
    seed: u64,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let theta = tape.param(Array2::from_shape_vec((1, mask.theta.len()), mask.theta.clone()).unwrap());
    let adj = relaxed_view_tape(&mut tape, &g.adjacency, theta, &mask.pairs);
    let x = tape.constant(g.features.clone());
    let nets = Nets::new(cfg);
    let gi = GraphInput {
        x,
        structure: Structure::Relaxed(adj),
        seed,
    };
    let h = nets.env_features(&mut tape, &b, gi);
    let logits = nets.env_logits(&mut tape, &b, h);
    let sel = tape.gather_rows(logits, nodes.to_vec());
    let l = objectives::node_ce(&mut tape, sel, &vec![target; nodes.len()]);
    let loss = tape.mean_all(l);
    let grads = tape.backward(loss);
    let g = grads.get_or_zeros(theta, (1, mask.theta.len()));
    (tape.scalar(loss), g.iter().copied().collect())
}

/// Produce `k` intervened views of `g` with `u` and `w` frozen.
pub fn optimize_views(
    g: &Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    k: usize,
    opts: &ViewOptions,
    seed: u64,
) -> Result<ViewSet> {
    if k != cfg.num_envs {
        return Err(Error::Config(format!(
            "{k} views but the environment classifier has {} outputs",
            cfg.num_envs
        )));
    }
    let budget = opts.budget.unwrap_or_else(|| default_budget(g));
    if budget == 0 {
        return Err(Error::Config("intervention budget must be at least 1".into()));
    }
    let pairs = candidate_pairs(g, opts.num_sample, seed);
    if budget > pairs.len() {
        return Err(Error::Config(format!(
            "budget {budget} exceeds the {} candidate pairs",
            pairs.len()
        )));
    }
    let nodes = target_nodes(g);
    let mut trace = Trace::new();
    let mut masks = Vec::with_capacity(k);
    let mut views = Vec::with_capacity(k);
    for target in 0..k {
        let mut mask = InterventionMask::new(g.num_nodes(), pairs.clone(), budget);
        let view_seed = seed.wrapping_add(1 + target as u64);
        match opts.maker {
            ViewMaker::RandomFlip => {
                let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
                for t in mask.theta.iter_mut() {
                    *t = rng.random::<f64>();
                }
            }
            ViewMaker::GradientFlip => {
                let (loss, grad) = view_loss_and_grad(g, &nodes, params, cfg, &mask, target, seed);
                trace.push_checked(0, &format!("extrapolation_loss_{target}"), loss)?;
                // rescale −∇ to [0,1], keeping the order
                let lo = grad.iter().fold(f64::INFINITY, |a, v| a.min(-v));
                let hi = grad.iter().fold(f64::NEG_INFINITY, |a, v| a.max(-v));
                if hi > lo {
                    mask.theta = grad.iter().map(|v| (-v - lo) / (hi - lo)).collect();
                }
            }
            ViewMaker::Gradient => {
                for step in 0..opts.steps {
                    let (loss, grad) = view_loss_and_grad(g, &nodes, params, cfg, &mask, target, seed);
                    trace.push_checked(step, &format!("extrapolation_loss_{target}"), loss)?;
                    let scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    if scale > 0.0 {
                        for (t, gv) in mask.theta.iter_mut().zip(&grad) {
                            *t = (*t - opts.step_size * gv / scale).clamp(0.0, 1.0);
                        }
                    }
                }
                let (loss, _) = view_loss_and_grad(g, &nodes, params, cfg, &mask, target, seed);
                trace.push_checked(opts.steps, &format!("extrapolation_loss_{target}"), loss)?;
            }
        }
        mask.discretize(view_seed);
        let s = mask.discrete_matrix().expect("just discretized");
        let adj = apply_structural_intervention(&g.adjacency, &s)?;
        views.push(g.with_adjacency(adj));
        masks.push(mask);
    }
    Ok(ViewSet { views, masks, trace })
}

/// Accuracy of the frozen recognizer at assigning view `k` to environment
/// `k`, over the target nodes.
pub fn view_env_accuracy(views: &[Graph], params: &ParameterSet, cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (k, v) in views.iter().enumerate() {
        let rho = crate::nets::forward_env_weights(params, cfg, v, cfg.num_envs, seed)?;
        for i in target_nodes(v) {
            let row = rho.row(i);
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
                .0;
            correct += usize::from(arg == k);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forced_cases() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let s = array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let out = apply_structural_intervention(&a, &s).unwrap();
        assert_eq!(out[[0, 1]], 0.0);
        assert_eq!(out[[0, 2]], 1.0);
        assert_eq!(apply_structural_intervention(&a, &Array2::zeros((3, 3))).unwrap(), a);
        let bad = array![[0.0, 0.5, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(matches!(apply_structural_intervention(&a, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn relaxed_view_cases() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(relaxed_view(&a, &Array2::zeros((3, 3))), a);
        let mut th = Array2::zeros((3, 3));
        th[[0, 2]] = 1.0;
        th[[2, 0]] = 1.0;
        let v = relaxed_view(&a, &th);
        assert_eq!(v[[0, 2]], 1.0);
        assert_eq!(v[[0, 1]], 1.0);
    }

    #[test]
    fn discretize_keeps_top_entries() {
        let mut m = InterventionMask::new(4, vec![(0, 1), (0, 2), (1, 3)], 2);
        m.theta = vec![0.2, 0.9, 0.5];
        m.discretize(0);
        assert_eq!(m.discrete.unwrap(), vec![(0, 2), (1, 3)]);
    }
}
