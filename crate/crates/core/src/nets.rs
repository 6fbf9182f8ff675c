//! Encoders, heads, parameter groups and optimizers.
//!
//! A [`ParameterSet`] holds named groups (`phi`, `u`, `w`, `d`, `c`,
//! `c_1`..`c_K`). Each training step binds the groups onto a fresh
//! [`Tape`]; only the groups being trained become differentiable leaves, the
//! rest enter as constants and are therefore untouched by the update.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_with_self_loops, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Gcn,
    Sage,
    Gat,
    Gpr,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "sage" => Ok(Self::Sage),
            "gat" => Ok(Self::Gat),
            "gpr" => Ok(Self::Gpr),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// SAGE only: keep at most this many neighbors per node.
    pub sample_neighbors: Option<usize>,
    /// GPR only: number of propagation steps.
    pub gpr_steps: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Gcn,
            layers: 2,
            hidden_dim: 32,
            output_dim: 32,
            sample_neighbors: None,
            gpr_steps: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.hidden_dim < 1 || self.output_dim < 1 {
            return Err(Error::Config(
                "encoder layers, hidden_dim and output_dim must be at least 1".into(),
            ));
        }
        if self.sample_neighbors == Some(0) {
            return Err(Error::Config("sample_neighbors must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of hops a node's output depends on.
    pub fn receptive_field(&self) -> usize {
        match self.backbone {
            Backbone::Gpr => self.gpr_steps,
            _ => self.layers,
        }
    }
}

/// What the environment classifier `w` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnvSource {
    /// The environmental encoder `u(G)`.
    Learned,
    /// Fixed Gaussian noise of the given width.
    Noise { dim: usize },
    /// A slice of the raw feature columns.
    Features { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub in_dim: usize,
    pub num_classes: usize,
    pub num_envs: usize,
    pub head_hidden: usize,
    pub env_source: EnvSource,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, in_dim: usize, num_classes: usize, num_envs: usize) -> Self {
        Self {
            encoder,
            in_dim,
            num_classes,
            num_envs,
            head_hidden: 32,
            env_source: EnvSource::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_envs < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.num_envs)));
        }
        if self.num_classes < 1 || self.in_dim < 1 || self.head_hidden < 1 {
            return Err(Error::Config("widths must be at least 1".into()));
        }
        if let EnvSource::Features { start, end } = self.env_source {
            if start >= end || end > self.in_dim {
                return Err(Error::Config(format!(
                    "env_source feature slice {start}..{end} invalid for width {}",
                    self.in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn env_input_dim(&self) -> usize {
        match self.env_source {
            EnvSource::Learned => self.encoder.output_dim,
            EnvSource::Noise { dim } => dim,
            EnvSource::Features { start, end } => end - start,
        }
    }

    pub fn classifier_groups(&self) -> Vec<String> {
        (1..=self.num_envs).map(|k| format!("c_{k}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Optimizers and parameter groups
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }

    /// Descend along `grads` (or ascend when `sign` is -1).
    fn apply(&mut self, arrays: &mut [Array2<f64>], grads: &[Array2<f64>], sign: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (a, g) in arrays.iter_mut().zip(grads) {
                    a.scaled_add(-sign * self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != arrays.len() {
                    self.m = arrays.iter().map(|a| Array2::zeros(a.raw_dim())).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for (i, (a, g)) in arrays.iter_mut().zip(grads).enumerate() {
                    let (b1, b2) = (self.beta1, self.beta2);
                    self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                    let (lr, eps) = (self.lr, self.eps);
                    ndarray::Zip::from(a)
                        .and(&self.m[i])
                        .and(&self.v[i])
                        .for_each(|p, &m, &v| {
                            *p -= sign * lr * (m / c1) / ((v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    pub arrays: Vec<Array2<f64>>,
    pub optimizer: Optimizer,
}

/// Named parameter groups with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    groups: BTreeMap<String, Group>,
}

/// Tape handles for every group of a [`ParameterSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Vec<Var>>,
}

impl Bound {
    pub fn get(&self, group: &str) -> &[Var] {
        self.vars
            .get(group)
            .map(Vec::as_slice)
            .unwrap_or_else(|| panic!("group `{group}` is not bound"))
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            groups: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, arrays: Vec<Array2<f64>>, optimizer: Optimizer) -> Result<()> {
        if self.groups.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter group `{name}`")));
        }
        self.groups.insert(
            name.to_string(),
            Group {
                name: name.to_string(),
                arrays,
                optimizer,
            },
        );
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn group(&self, name: &str) -> Option<&Group> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut Group> {
        self.groups.get_mut(name)
    }

    pub fn arrays(&self, name: &str) -> &[Array2<f64>] {
        &self.groups[name].arrays
    }

    pub fn num_scalars(&self) -> usize {
        self.groups
            .values()
            .flat_map(|g| g.arrays.iter())
            .map(|a| a.len())
            .sum()
    }

    /// Put every group on `tape`; groups in `trainable` become leaves that
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[&str]) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, g) in &self.groups {
            let train = trainable.contains(&name.as_str());
            let vs = g
                .arrays
                .iter()
                .map(|a| {
                    if train {
                        tape.param(a.clone())
                    } else {
                        tape.constant(a.clone())
                    }
                })
                .collect();
            vars.insert(name.clone(), vs);
        }
        Bound { vars }
    }

    /// Gradients of every array in the listed groups.
    pub fn collect_grads(
        &self,
        grads: &crate::autograd::Grads,
        bound: &Bound,
        groups: &[&str],
    ) -> BTreeMap<String, Vec<Array2<f64>>> {
        groups
            .iter()
            .map(|&name| {
                let g = &self.groups[name];
                let gs = bound
                    .get(name)
                    .iter()
                    .zip(&g.arrays)
                    .map(|(&v, a)| grads.get_or_zeros(v, a.dim()))
                    .collect();
                (name.to_string(), gs)
            })
            .collect()
    }

    /// One optimizer step per listed group. `ascend` flips the direction.
    pub fn apply_grads(&mut self, grads: &BTreeMap<String, Vec<Array2<f64>>>, ascend: bool) {
        let sign = if ascend { -1.0 } else { 1.0 };
        for (name, gs) in grads {
            let g = self.groups.get_mut(name).expect("known group");
            g.optimizer.apply(&mut g.arrays, gs, sign);
        }
    }

    /// Bitwise fingerprint of a group, for frozen-group checks.
    pub fn fingerprint(&self, name: &str) -> Vec<u64> {
        self.groups[name]
            .arrays
            .iter()
            .flat_map(|a| a.iter().map(|v| v.to_bits()))
            .collect()
    }

    pub fn replace_group(&mut self, name: &str, arrays: Vec<Array2<f64>>) -> Result<()> {
        let g = self
            .groups
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter group `{name}`")))?;
        if g.arrays.len() != arrays.len()
            || g.arrays.iter().zip(&arrays).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Shape(format!("replacement arrays for `{name}` do not match")));
        }
        g.arrays = arrays;
        g.optimizer.reset();
        Ok(())
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Adam, for `c` and `c_1..c_K`.
    pub heads: f64,
    /// SGD, for `phi`, `u`, `d` and `w`.
    pub adversarial: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            heads: 0.01,
            adversarial: 0.05,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Fan-in scaled linear layer `[W, b]`.
fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scale: f64) -> Vec<Array2<f64>> {
    let bound = scale / (fan_in as f64).sqrt();
    vec![
        uniform(rng, fan_in, fan_out, bound),
        uniform(rng, 1, fan_out, bound),
    ]
}

const FINAL_SCALE: f64 = 0.1;

fn init_encoder(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, in_dim: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::new();
    let dims: Vec<usize> = (0..=cfg.layers)
        .map(|l| {
            if l == 0 {
                in_dim
            } else if l == cfg.layers {
                cfg.output_dim
            } else {
                cfg.hidden_dim
            }
        })
        .collect();
    for l in 0..cfg.layers {
        let (fi, fo) = (dims[l], dims[l + 1]);
        let scale = if l + 1 == cfg.layers { FINAL_SCALE } else { 1.0 };
        match cfg.backbone {
            Backbone::Gcn | Backbone::Gpr => out.extend(linear(rng, fi, fo, scale)),
            Backbone::Sage => {
                let bound = scale / (fi as f64).sqrt();
                out.push(uniform(rng, fi, fo, bound));
                out.push(uniform(rng, fi, fo, bound));
                out.push(uniform(rng, 1, fo, bound));
            }
            Backbone::Gat => {
                out.extend(linear(rng, fi, fo, scale));
                let ab = 1.0 / (fo as f64).sqrt();
                out.push(uniform(rng, fo, 1, ab));
                out.push(uniform(rng, fo, 1, ab));
            }
        }
    }
    if cfg.backbone == Backbone::Gpr {
        out.push(Array2::from_shape_fn((1, cfg.gpr_steps + 1), |(_, t)| 0.9f64.powi(t as i32)));
    }
    out
}

fn init_mlp(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, out_dim: usize, final_scale: f64) -> Vec<Array2<f64>> {
    let mut v = linear(rng, in_dim, hidden, 1.0);
    v.extend(linear(rng, hidden, out_dim, final_scale));
    v
}

/// Fresh parameters for every group.
pub fn init_parameters(cfg: &ModelConfig, lr: LearningRates, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.encoder.output_dim;
    let sgd = || Optimizer::new(OptimizerKind::Sgd, lr.adversarial);
    let adam = || Optimizer::new(OptimizerKind::Adam, lr.heads);
    let mut ps = ParameterSet::new();
    ps.insert("phi", init_encoder(&mut rng, &cfg.encoder, cfg.in_dim), sgd())?;
    ps.insert("u", init_encoder(&mut rng, &cfg.encoder, cfg.in_dim), sgd())?;
    ps.insert(
        "w",
        init_mlp(&mut rng, cfg.env_input_dim(), cfg.head_hidden, cfg.num_envs, FINAL_SCALE),
        sgd(),
    )?;
    ps.insert("d", init_mlp(&mut rng, 2 * h, cfg.head_hidden, cfg.in_dim, 1.0), sgd())?;
    ps.insert("c", init_mlp(&mut rng, h, cfg.head_hidden, cfg.num_classes, 1.0), adam())?;
    for name in cfg.classifier_groups() {
        ps.insert(&name, init_mlp(&mut rng, h, cfg.head_hidden, cfg.num_classes, 1.0), adam())?;
    }
    Ok(ps)
}

// ---------------------------------------------------------------------------
// Forward passes on a tape
// ---------------------------------------------------------------------------

/// The adjacency an encoder propagates over.
#[derive(Debug, Clone, Copy)]
pub enum Structure<'a> {
    Fixed(&'a Array2<f64>),
    /// A differentiable (possibly relaxed) adjacency already on the tape.
    Relaxed(Var),
}

fn sym_normalized(tape: &mut Tape, s: Structure) -> Var {
    match s {
        Structure::Fixed(a) => tape.constant(normalize_with_self_loops(a)),
        Structure::Relaxed(a) => {
            let n = tape.shape(a).0;
            let eye = tape.constant(Array2::eye(n));
            let at = tape.add(a, eye);
            let deg = tape.sum_cols(at);
            let dinv = tape.powf(deg, -0.5);
            let dinv_t = tape.transpose(dinv);
            let left = tape.mul(at, dinv);
            tape.mul(left, dinv_t)
        }
    }
}

fn neighbor_mask(a: &Array2<f64>, keep: usize, seed: u64) -> Array2<f64> {
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::zeros((n, n));
    for i in 0..n {
        let mut nb: Vec<usize> = (0..n).filter(|&j| j != i && a[[i, j]] > 0.0).collect();
        if nb.len() > keep {
            nb.shuffle(&mut rng);
            nb.truncate(keep);
        }
        for j in nb {
            mask[[i, j]] = 1.0;
        }
    }
    mask
}

/// Mean over the closed neighborhood: `(A + I) / (deg + 1)`.
fn mean_operator(tape: &mut Tape, s: Structure, sample: Option<usize>, seed: u64) -> Var {
    let a = match s {
        Structure::Fixed(a) => tape.constant(a.clone()),
        Structure::Relaxed(v) => v,
    };
    let a = match sample {
        Some(k) => {
            let m = neighbor_mask(tape.value(a), k, seed);
            let m = tape.constant(m);
            tape.mul(a, m)
        }
        None => a,
    };
    let n = tape.shape(a).0;
    let eye = tape.constant(Array2::eye(n));
    let at = tape.add(a, eye);
    let deg = tape.sum_cols(at);
    tape.div(at, deg)
}

fn closed_adjacency(tape: &mut Tape, s: Structure) -> Var {
    let a = match s {
        Structure::Fixed(a) => tape.constant(a.clone()),
        Structure::Relaxed(v) => v,
    };
    let n = tape.shape(a).0;
    let eye = tape.constant(Array2::eye(n));
    tape.add(a, eye)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    tape.add(xw, b)
}

/// Message-passing encoder; ReLU between layers and tanh on the output.
pub fn encoder_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    p: &[Var],
    x: Var,
    s: Structure,
    seed: u64,
) -> Var {
    let mut h = x;
    let last = cfg.layers - 1;
    match cfg.backbone {
        Backbone::Gcn => {
            let op = sym_normalized(tape, s);
            for l in 0..cfg.layers {
                let hw = tape.matmul(h, p[2 * l]);
                let agg = tape.matmul(op, hw);
                let z = tape.add(agg, p[2 * l + 1]);
                h = if l == last { tape.tanh(z) } else { tape.relu(z) };
            }
        }
        Backbone::Sage => {
            let op = mean_operator(tape, s, cfg.sample_neighbors, seed);
            for l in 0..cfg.layers {
                let own = tape.matmul(h, p[3 * l]);
                let mean = tape.matmul(op, h);
                let nb = tape.matmul(mean, p[3 * l + 1]);
                let z = tape.add(own, nb);
                let z = tape.add(z, p[3 * l + 2]);
                h = if l == last { tape.tanh(z) } else { tape.relu(z) };
            }
        }
        Backbone::Gat => {
            let mask = closed_adjacency(tape, s);
            for l in 0..cfg.layers {
                let (w, b, a_src, a_dst) = (p[4 * l], p[4 * l + 1], p[4 * l + 2], p[4 * l + 3]);
                let z = tape.matmul(h, w);
                let src = tape.matmul(z, a_src);
                let dst = tape.matmul(z, a_dst);
                let dst_t = tape.transpose(dst);
                let e = tape.add(src, dst_t);
                let e = tape.leaky_relu(e, 0.2);
                let att = tape.weighted_softmax_rows(e, mask);
                let agg = tape.matmul(att, z);
                let out = tape.add(agg, b);
                h = if l == last { tape.tanh(out) } else { tape.relu(out) };
            }
        }
        Backbone::Gpr => {
            for l in 0..cfg.layers {
                h = affine(tape, h, p[2 * l], p[2 * l + 1]);
                if l != last {
                    h = tape.relu(h);
                }
            }
            let gamma = p[2 * cfg.layers];
            let op = sym_normalized(tape, s);
            let mut z = h;
            let mut acc = {
                let g0 = column_of(tape, gamma, 0);
                tape.mul(z, g0)
            };
            for t in 1..=cfg.gpr_steps {
                z = tape.matmul(op, z);
                let gt = column_of(tape, gamma, t);
                let term = tape.mul(z, gt);
                acc = tape.add(acc, term);
            }
            h = tape.tanh(acc);
        }
    }
    h
}

/// `1×1` view of entry `t` of a `1×m` row, as a differentiable product.
fn column_of(tape: &mut Tape, row: Var, t: usize) -> Var {
    let m = tape.shape(row).1;
    let mut sel = Array2::zeros((m, 1));
    sel[[t, 0]] = 1.0;
    let sel = tape.constant(sel);
    tape.matmul(row, sel)
}

/// Two-layer perceptron with ReLU hidden units.
pub fn mlp_forward(tape: &mut Tape, p: &[Var], x: Var) -> Var {
    let h = affine(tape, x, p[0], p[1]);
    let h = tape.relu(h);
    affine(tape, h, p[2], p[3])
}

/// A graph (or view of one) placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub x: Var,
    pub structure: Structure<'a>,
    pub seed: u64,
}

impl<'a> GraphInput<'a> {
    pub fn new(tape: &mut Tape, g: &'a Graph, seed: u64) -> Self {
        Self {
            x: tape.constant(g.features.clone()),
            structure: Structure::Fixed(&g.adjacency),
            seed,
        }
    }
}

/// Tape-level model functions.
#[derive(Debug, Clone)]
pub struct Nets<'c> {
    pub cfg: &'c ModelConfig,
}

impl<'c> Nets<'c> {
    pub fn new(cfg: &'c ModelConfig) -> Self {
        Self { cfg }
    }

    pub fn phi(&self, tape: &mut Tape, b: &Bound, g: GraphInput) -> Var {
        encoder_forward(tape, &self.cfg.encoder, b.get("phi"), g.x, g.structure, g.seed)
    }

    pub fn u(&self, tape: &mut Tape, b: &Bound, g: GraphInput) -> Var {
        encoder_forward(tape, &self.cfg.encoder, b.get("u"), g.x, g.structure, g.seed ^ 0x5555)
    }

    /// Input of the environment classifier, honoring `env_source`.
    pub fn env_features(&self, tape: &mut Tape, b: &Bound, g: GraphInput) -> Var {
        match &self.cfg.env_source {
            EnvSource::Learned => self.u(tape, b, g),
            EnvSource::Noise { dim } => {
                let n = tape.shape(g.x).0;
                let mut rng = ChaCha8Rng::seed_from_u64(g.seed ^ 0xA0A0);
                let noise = Array2::from_shape_fn((n, *dim), |_| {
                    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
                });
                tape.constant(noise)
            }
            EnvSource::Features { start, end } => {
                let sel = Array2::from_shape_fn((self.cfg.in_dim, end - start), |(i, j)| {
                    if i == start + j {
                        1.0
                    } else {
                        0.0
                    }
                });
                let sel = tape.constant(sel);
                tape.matmul(g.x, sel)
            }
        }
    }

    /// Environment logits `w(h_e)`.
    pub fn env_logits(&self, tape: &mut Tape, b: &Bound, h_e: Var) -> Var {
        mlp_forward(tape, b.get("w"), h_e)
    }

    pub fn rho(&self, tape: &mut Tape, b: &Bound, g: GraphInput) -> Var {
        let h = self.env_features(tape, b, g);
        let logits = self.env_logits(tape, b, h);
        tape.softmax_rows(logits)
    }

    pub fn classify(&self, tape: &mut Tape, b: &Bound, group: &str, h: Var) -> Var {
        mlp_forward(tape, b.get(group), h)
    }

    pub fn reconstruct(&self, tape: &mut Tape, b: &Bound, h_e: Var, h_i: Var) -> Var {
        let z = tape.concat_cols(&[h_e, h_i]);
        mlp_forward(tape, b.get("d"), z)
    }
}

fn check_graph(cfg: &ModelConfig, g: &Graph) -> Result<()> {
    if g.feature_dim() != cfg.in_dim {
        return Err(Error::Config(format!(
            "graph has {} feature columns, model expects {}",
            g.feature_dim(),
            cfg.in_dim
        )));
    }
    Ok(())
}

/// `Φ(G)`, `N×H`, without gradients.
pub fn forward_phi(params: &ParameterSet, cfg: &ModelConfig, g: &Graph, seed: u64) -> Result<Array2<f64>> {
    check_graph(cfg, g)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let gi = GraphInput::new(&mut tape, g, seed);
    let h = Nets::new(cfg).phi(&mut tape, &b, gi);
    Ok(tape.value(h).clone())
}

/// `u(G)`, `N×H`, without gradients.
pub fn forward_u(params: &ParameterSet, cfg: &ModelConfig, g: &Graph, seed: u64) -> Result<Array2<f64>> {
    check_graph(cfg, g)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let gi = GraphInput::new(&mut tape, g, seed);
    let h = Nets::new(cfg).u(&mut tape, &b, gi);
    Ok(tape.value(h).clone())
}

/// `ρ = softmax(w(u(G)))`.
pub fn forward_env_weights(
    params: &ParameterSet,
    cfg: &ModelConfig,
    g: &Graph,
    k: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if k < 2 {
        return Err(Error::Config(format!("K must be at least 2, got {k}")));
    }
    if k != cfg.num_envs {
        return Err(Error::Config(format!(
            "requested K={k} but the environment classifier has {} outputs",
            cfg.num_envs
        )));
    }
    check_graph(cfg, g)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let gi = GraphInput::new(&mut tape, g, seed);
    let rho = Nets::new(cfg).rho(&mut tape, &b, gi);
    Ok(tape.value(rho).clone())
}

fn head_input_check(params: &ParameterSet, group: &str, width: usize) -> Result<()> {
    let g = params
        .group(group)
        .ok_or_else(|| Error::Config(format!("no parameter group `{group}`")))?;
    let expected = g.arrays[0].nrows();
    if expected != width {
        return Err(Error::Config(format!(
            "`{group}` expects input width {expected}, got {width}"
        )));
    }
    Ok(())
}

/// Unnormalized class scores from classifier group `c` (or `c_k`).
pub fn forward_classifier(params: &ParameterSet, group: &str, h: &Array2<f64>) -> Result<Array2<f64>> {
    head_input_check(params, group, h.ncols())?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let x = tape.constant(h.clone());
    let s = mlp_forward(&mut tape, b.get(group), x);
    Ok(tape.value(s).clone())
}

pub fn forward_reconstructor(params: &ParameterSet, h_e: &Array2<f64>, h_i: &Array2<f64>) -> Result<Array2<f64>> {
    if h_e.nrows() != h_i.nrows() {
        return Err(Error::Config("h_e and h_i row counts differ".into()));
    }
    head_input_check(params, "d", h_e.ncols() + h_i.ncols())?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &[]);
    let he = tape.constant(h_e.clone());
    let hi = tape.constant(h_i.clone());
    let z = tape.concat_cols(&[he, hi]);
    let out = mlp_forward(&mut tape, b.get("d"), z);
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-4;

/// Compare analytic gradients with central differences on up to `probes`
/// randomly chosen scalars of the listed groups; returns the largest
/// relative error `|a - n| / max(|a|, |n|, 1e-6)`.
///
/// A probe whose difference quotient changes when the step is halved sits
/// within one step of a ReLU kink; it is replaced by another probe.
pub fn gradient_check<F>(params: &ParameterSet, groups: &[&str], probes: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, groups);
    let l = loss(&mut tape, &b);
    let grads = tape.backward(l);
    let analytic = params.collect_grads(&grads, &b, groups);

    let mut coords: Vec<(String, usize, usize)> = Vec::new();
    for &g in groups {
        for (ai, a) in params.arrays(g).iter().enumerate() {
            for e in 0..a.len() {
                coords.push((g.to_string(), ai, e));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);

    let eval = |ps: &ParameterSet| -> f64 {
        let mut t = Tape::new();
        let b = ps.bind(&mut t, &[]);
        let l = loss(&mut t, &b);
        t.scalar(l)
    };
    let diff = |group: &str, ai: usize, e: usize, h: f64| -> f64 {
        let mut p = params.clone();
        let arr = &mut p.group_mut(group).unwrap().arrays[ai];
        let slot = arr.as_slice_mut().expect("standard layout");
        let x0 = slot[e];
        slot[e] = x0 + h;
        let up = eval(&p);
        let arr = &mut p.group_mut(group).unwrap().arrays[ai];
        arr.as_slice_mut().unwrap()[e] = x0 - h;
        let down = eval(&p);
        (up - down) / (2.0 * h)
    };

    let mut worst = 0.0f64;
    let mut used = 0;
    for (group, ai, e) in coords {
        if used >= probes {
            break;
        }
        let fd = diff(&group, ai, e, FD_STEP);
        let fd_half = diff(&group, ai, e, FD_STEP / 2.0);
        if (fd - fd_half).abs() > 1e-7 + 1e-5 * fd.abs() {
            continue;
        }
        used += 1;
        let a = analytic[&group][ai].as_slice().unwrap()[e];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"IENEGRP1";
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    file: String,
    sha256: String,
    shapes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    model: ModelConfig,
    groups: Vec<GroupEntry>,
}

fn encode_group(arrays: &[Array2<f64>]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F64);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        buf.extend_from_slice(&(a.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(a.ncols() as u64).to_le_bytes());
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn decode_group(name: &str, bytes: &[u8]) -> Result<Vec<Array2<f64>>> {
    let bad = |m: &str| Error::Corrupt(format!("group `{name}`: {m}"));
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut one = [0u8; 1];
    r.read_exact(&mut one).map_err(|_| bad("truncated header"))?;
    let width = match one[0] {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(bad(&format!("unknown dtype code {other}"))),
    };
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated shape"))?;
        let rows = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u64b).map_err(|_| bad("truncated shape"))?;
        let cols = u64::from_le_bytes(u64b) as usize;
        let need = rows.checked_mul(cols).and_then(|n| n.checked_mul(width)).ok_or_else(|| bad("shape overflow"))?;
        if r.len() < need {
            return Err(bad("truncated data"));
        }
        let (data, rest) = r.split_at(need);
        r = rest;
        let vals: Vec<f64> = if width == 8 {
            data.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        out.push(Array2::from_shape_vec((rows, cols), vals).map_err(|_| bad("shape"))?);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Write one binary file per group plus `manifest.json`.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ParameterSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups = Vec::new();
    for name in params.names() {
        let arrays = params.arrays(&name);
        let bytes = encode_group(arrays);
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        groups.push(GroupEntry {
            name: name.clone(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
            shapes: arrays.iter().map(|a| a.dim()).collect(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        model: cfg.clone(),
        groups,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))
}

/// Load a checkpoint into parameters shaped for `expected`.
///
/// Arrays whose shapes differ from what `expected` would create are a shape
/// error; missing or damaged group files are corruption errors.
pub fn load_checkpoint(dir: &Path, expected: &ModelConfig, lr: LearningRates) -> Result<ParameterSet> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    let mut params = init_parameters(expected, lr, 0)?;
    for name in params.names() {
        let entry = manifest
            .groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Corrupt(format!("group `{name}` missing from manifest")))?;
        let gpath = dir.join(&entry.file);
        let bytes = fs::read(&gpath)
            .map_err(|_| Error::Corrupt(format!("group `{name}`: file {} missing", entry.file)))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Corrupt(format!("group `{name}`: checksum mismatch")));
        }
        let arrays = decode_group(&name, &bytes)?;
        let want: Vec<(usize, usize)> = params.arrays(&name).iter().map(|a| a.dim()).collect();
        let got: Vec<(usize, usize)> = arrays.iter().map(|a| a.dim()).collect();
        if want != got {
            return Err(Error::Shape(format!(
                "group `{name}` has shapes {got:?}, the configured model needs {want:?}"
            )));
        }
        params.replace_group(&name, arrays)?;
    }
    Ok(params)
}

/// Model configuration recorded in a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    Ok(m.model)
}
