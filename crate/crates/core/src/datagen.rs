//! Synthetic OOD graph generators with known ground truth.
//!
//! [`generate_scm_dataset`] builds one graph per training environment plus
//! validation and test graphs. Node features are three blocks:
//!
//! * invariant: `invariant_strength * M[y] + noise`, identical mechanism in
//!   every environment (variant C shifts coordinate 0 by environment);
//! * spurious: `spurious_strength * S_e[y~] + noise`, where `S_e` is the
//!   environment's codebook (shared class codes plus an environment offset)
//!   and `y~` equals the label with the environment's agreement rate and is
//!   a uniformly drawn other class otherwise;
//! * irrelevant: `env_shift * r_e + noise`, label-independent.
//!
//! Edges come from a stochastic block model over classes. Variant B adds an
//! environment-dependent intra-class edge probability.
//!
//! All additive noise is `0.3 * N(0, 1)`.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{io as gio, FeatureRoles, Graph, MetricName, MultiGraphDataset};

pub const NOISE_SCALE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalVariant {
    /// Environment drives spurious and irrelevant features only.
    A,
    /// As A, and the environment also changes intra-class connectivity.
    B,
    /// As B, and one invariant coordinate is environment-shifted.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbmConfig {
    pub p_intra: f64,
    pub p_inter: f64,
    /// Extra intra-class edge probability per training environment
    /// (variants B and C). `None` spreads 0.05 down to 0.0.
    pub env_intra_delta: Option<Vec<f64>>,
    pub test_intra_delta: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            p_intra: 0.012,
            p_inter: 0.003,
            env_intra_delta: None,
            test_intra_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub d_inv: usize,
    pub d_spu: usize,
    pub d_irr: usize,
    pub num_train_envs: usize,
    pub num_val_graphs: usize,
    pub num_test_graphs: usize,
    pub spurious_strength: f64,
    pub invariant_strength: f64,
    /// Probability that a node's spurious code matches its label, per
    /// training environment. `None` spreads 0.95 down to 0.75.
    pub spurious_agreement: Option<Vec<f64>>,
    /// Scale of every environment-specific offset (irrelevant block,
    /// codebook offset, variant C shift). Zero makes all environments
    /// identically distributed apart from edge deltas.
    pub env_shift: f64,
    pub test_flip: bool,
    pub causal_variant: CausalVariant,
    pub graph: SbmConfig,
    /// Share of nodes in a training graph that carry the train mask; the
    /// rest are validation nodes.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            num_nodes: 600,
            num_classes: 2,
            d_inv: 4,
            d_spu: 4,
            d_irr: 4,
            num_train_envs: 2,
            num_val_graphs: 1,
            num_test_graphs: 1,
            spurious_strength: 2.0,
            invariant_strength: 0.4,
            spurious_agreement: None,
            env_shift: 1.0,
            test_flip: true,
            causal_variant: CausalVariant::A,
            graph: SbmConfig::default(),
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_inv < 1 {
            return bad("d_inv must be at least 1".into());
        }
        if self.num_train_envs < 2 {
            return bad("num_train_envs must be at least 2".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.num_nodes < 2 {
            return bad("num_nodes must be at least 2".into());
        }
        if self.num_val_graphs < 1 || self.num_test_graphs < 1 {
            return bad("need at least one validation and one test graph".into());
        }
        if self.test_flip && self.d_spu == 0 {
            return bad("test_flip needs a spurious block (d_spu = 0)".into());
        }
        if self.spurious_strength < 0.0 || self.env_shift < 0.0 || self.invariant_strength < 0.0 {
            return bad("strengths must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train_fraction {} outside [0,1]", self.train_fraction));
        }
        for (name, p) in [
            ("graph.p_intra", self.graph.p_intra),
            ("graph.p_inter", self.graph.p_inter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0,1]"));
            }
        }
        for d in self.intra_deltas().into_iter().chain([self.graph.test_intra_delta]) {
            let p = self.graph.p_intra + d;
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("intra-class edge probability {p} outside [0,1]"));
            }
        }
        let agreement = self.agreements();
        if agreement.len() != self.num_train_envs {
            return bad(format!(
                "spurious_agreement has {} entries, expected {}",
                agreement.len(),
                self.num_train_envs
            ));
        }
        if agreement.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("spurious_agreement entries must lie in [0,1]".into());
        }
        if let Some(d) = &self.graph.env_intra_delta {
            if d.len() != self.num_train_envs {
                return bad(format!(
                    "graph.env_intra_delta has {} entries, expected {}",
                    d.len(),
                    self.num_train_envs
                ));
            }
        }
        Ok(())
    }

    pub fn agreements(&self) -> Vec<f64> {
        self.spurious_agreement
            .clone()
            .unwrap_or_else(|| linspace(0.95, 0.75, self.num_train_envs))
    }

    pub fn intra_deltas(&self) -> Vec<f64> {
        match self.causal_variant {
            CausalVariant::A => vec![0.0; self.num_train_envs],
            _ => self
                .graph
                .env_intra_delta
                .clone()
                .unwrap_or_else(|| linspace(0.05, 0.0, self.num_train_envs)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.d_inv + self.d_spu + self.d_irr
    }

    pub fn roles(&self) -> FeatureRoles {
        FeatureRoles {
            invariant: 0..self.d_inv,
            spurious: self.d_inv..self.d_inv + self.d_spu,
            irrelevant: self.d_inv + self.d_spu..self.feature_dim(),
        }
    }
}

/// Everything that defines one environment's generating mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub env_id: usize,
    pub split: String,
    pub spurious_codebook: Vec<Vec<f64>>,
    pub agreement: f64,
    pub irrelevant_offset: Vec<f64>,
    pub intra_delta: f64,
    pub invariant_shift: f64,
}

/// Sidecar written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub roles: FeatureRoles,
    pub invariant_codebook: Vec<Vec<f64>>,
    pub base_spurious_codebook: Vec<Vec<f64>>,
    pub environments: Vec<EnvDescriptor>,
    pub config: ScmConfig,
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let c = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j])
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    if d == 0 {
        return Array1::zeros(0);
    }
    loop {
        let v = Array1::from_shape_fn(d, |_| normal(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Class codebook with unit rows. Two classes get antipodal codes.
fn class_codebook(rng: &mut ChaCha8Rng, classes: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((classes, d));
    if d == 0 {
        return out;
    }
    if classes == 2 {
        let v = unit_vector(rng, d);
        out.row_mut(0).assign(&v);
        out.row_mut(1).assign(&(-&v));
    } else {
        for c in 0..classes {
            out.row_mut(c).assign(&unit_vector(rng, d));
        }
    }
    out
}

struct EnvMechanism {
    codebook: Array2<f64>,
    agreement: f64,
    irrelevant_offset: Array1<f64>,
    intra_delta: f64,
    invariant_shift: f64,
}

fn sample_graph(
    cfg: &ScmConfig,
    inv_codebook: &Array2<f64>,
    env: &EnvMechanism,
    rng: &mut ChaCha8Rng,
) -> Result<Graph> {
    let n = cfg.num_nodes;
    let c = cfg.num_classes;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut x = Array2::zeros((n, cfg.feature_dim()));
    let roles = cfg.roles();
    for v in 0..n {
        let y = labels[v];
        for j in 0..cfg.d_inv {
            x[[v, j]] = cfg.invariant_strength * inv_codebook[[y, j]] + NOISE_SCALE * normal(rng);
        }
        if cfg.causal_variant == CausalVariant::C {
            x[[v, 0]] += env.invariant_shift;
        }
        let code = if rng.random::<f64>() < env.agreement {
            y
        } else {
            let other = rng.random_range(0..c - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        };
        for (k, j) in roles.spurious.clone().enumerate() {
            x[[v, j]] = cfg.spurious_strength * env.codebook[[code, k]] + NOISE_SCALE * normal(rng);
        }
        for (k, j) in roles.irrelevant.clone().enumerate() {
            x[[v, j]] = env.irrelevant_offset[k] + NOISE_SCALE * normal(rng);
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] {
                cfg.graph.p_intra + env.intra_delta
            } else {
                cfg.graph.p_inter
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut g = Graph::from_edges(n, &edges, x, labels, c)?;
    g.roles = Some(roles);
    Ok(g)
}

fn assign_masks(g: &mut Graph, split: &str, train_fraction: f64, rng: &mut ChaCha8Rng) {
    let n = g.num_nodes();
    match split {
        "train" => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let cut = ((n as f64) * train_fraction).round() as usize;
            for (rank, &v) in order.iter().enumerate() {
                if rank < cut {
                    g.train_mask[v] = true;
                } else {
                    g.val_mask[v] = true;
                }
            }
        }
        "val" => g.val_mask = vec![true; n],
        _ => g.test_mask = vec![true; n],
    }
}

/// Generate a multi-graph OOD dataset and its ground truth.
pub fn generate_scm_dataset_with_truth(cfg: &ScmConfig) -> Result<(MultiGraphDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_train_envs;
    let inv_codebook = class_codebook(&mut rng, cfg.num_classes, cfg.d_inv);
    let base = class_codebook(&mut rng, cfg.num_classes, cfg.d_spu);

    let agreements = cfg.agreements();
    let deltas = cfg.intra_deltas();
    let shifts = linspace(cfg.env_shift, -cfg.env_shift, k);
    let mut train_mechs = Vec::with_capacity(k);
    for e in 0..k {
        let offset = unit_vector(&mut rng, cfg.d_spu) * cfg.env_shift;
        let codebook = &base + &offset.clone().insert_axis(Axis(0));
        let irrelevant_offset = unit_vector(&mut rng, cfg.d_irr) * cfg.env_shift;
        train_mechs.push(EnvMechanism {
            codebook,
            agreement: agreements[e],
            irrelevant_offset,
            intra_delta: deltas[e],
            invariant_shift: shifts[e],
        });
    }
    let mean_codebook = train_mechs
        .iter()
        .fold(Array2::zeros(base.raw_dim()), |acc, m| acc + &m.codebook)
        / k as f64;
    let mean_agreement = agreements.iter().sum::<f64>() / k as f64;
    let mean_delta = deltas.iter().sum::<f64>() / k as f64;

    let mut environments = Vec::new();
    let mut train_graphs = Vec::new();
    for (e, mech) in train_mechs.iter().enumerate() {
        let mut g = sample_graph(cfg, &inv_codebook, mech, &mut rng)?;
        g.env_id = Some(e);
        assign_masks(&mut g, "train", cfg.train_fraction, &mut rng);
        train_graphs.push(g);
        environments.push(describe(e, "train", mech));
    }

    let mut next_env = k;
    let mut val_graphs = Vec::new();
    for _ in 0..cfg.num_val_graphs {
        let mech = EnvMechanism {
            codebook: mean_codebook.clone(),
            agreement: mean_agreement,
            irrelevant_offset: unit_vector(&mut rng, cfg.d_irr) * cfg.env_shift,
            intra_delta: mean_delta,
            invariant_shift: 0.0,
        };
        let mut g = sample_graph(cfg, &inv_codebook, &mech, &mut rng)?;
        g.env_id = Some(next_env);
        assign_masks(&mut g, "val", cfg.train_fraction, &mut rng);
        environments.push(describe(next_env, "val", &mech));
        val_graphs.push(g);
        next_env += 1;
    }

    let t = cfg.num_test_graphs;
    let mut test_graphs = Vec::new();
    for i in 0..t {
        // Shift grows with the test index; the last graph is fully flipped.
        let factor = if cfg.test_flip {
            1.0 - 2.0 * (i + 1) as f64 / t as f64
        } else {
            1.0
        };
        let mech = EnvMechanism {
            codebook: &mean_codebook * factor,
            agreement: mean_agreement,
            irrelevant_offset: unit_vector(&mut rng, cfg.d_irr) * cfg.env_shift,
            intra_delta: if cfg.causal_variant == CausalVariant::A {
                0.0
            } else {
                cfg.graph.test_intra_delta
            },
            invariant_shift: 0.0,
        };
        let mut g = sample_graph(cfg, &inv_codebook, &mech, &mut rng)?;
        g.env_id = Some(next_env);
        assign_masks(&mut g, "test", cfg.train_fraction, &mut rng);
        environments.push(describe(next_env, "test", &mech));
        test_graphs.push(g);
        next_env += 1;
    }

    let ds = MultiGraphDataset {
        train_graphs,
        val_graphs,
        test_graphs,
        metric: MetricName::Accuracy,
    };
    let truth = GroundTruth {
        roles: cfg.roles(),
        invariant_codebook: to_rows(&inv_codebook),
        base_spurious_codebook: to_rows(&base),
        environments,
        config: cfg.clone(),
    };
    Ok((ds, truth))
}

fn describe(env_id: usize, split: &str, m: &EnvMechanism) -> EnvDescriptor {
    EnvDescriptor {
        env_id,
        split: split.to_string(),
        spurious_codebook: to_rows(&m.codebook),
        agreement: m.agreement,
        irrelevant_offset: m.irrelevant_offset.to_vec(),
        intra_delta: m.intra_delta,
        invariant_shift: m.invariant_shift,
    }
}

pub fn generate_scm_dataset(cfg: &ScmConfig) -> Result<MultiGraphDataset> {
    generate_scm_dataset_with_truth(cfg).map(|(ds, _)| ds)
}

/// Replace the spurious block with `strength * codebook[label] + noise`.
///
/// Without recorded roles every existing column is treated as invariant and
/// the new block is appended.
pub fn apply_artificial_transformation(
    g: &Graph,
    env_codebook: &Array2<f64>,
    strength: f64,
    seed: u64,
) -> Result<Graph> {
    if env_codebook.nrows() != g.num_classes {
        return Err(Error::Shape(format!(
            "codebook has {} rows, graph has {} classes",
            env_codebook.nrows(),
            g.num_classes
        )));
    }
    let d = g.feature_dim();
    let roles = g.roles.clone().unwrap_or(FeatureRoles {
        invariant: 0..d,
        spurious: d..d,
        irrelevant: d..d,
    });
    let inv = g.features.slice(s![.., roles.invariant.clone()]);
    let irr = g.features.slice(s![.., roles.irrelevant.clone()]);
    let width = env_codebook.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spu = Array2::from_shape_fn((g.num_nodes(), width), |(v, k)| {
        strength * env_codebook[[g.labels[v], k]] + NOISE_SCALE * normal(&mut rng)
    });
    let features = ndarray::concatenate(Axis(1), &[inv, spu.view(), irr])
        .expect("blocks share row count");
    let a = inv.ncols();
    let mut out = g.clone();
    out.features = features;
    out.roles = Some(FeatureRoles {
        invariant: 0..a,
        spurious: a..a + width,
        irrelevant: a + width..a + width + irr.ncols(),
    });
    Ok(out)
}

/// Write a dataset plus its `ground_truth.json` sidecar.
pub fn save_dataset(root: &Path, ds: &MultiGraphDataset, truth: Option<&GroundTruth>) -> Result<()> {
    gio::write_dataset(root, ds)?;
    if let Some(t) = truth {
        let p = root.join("ground_truth.json");
        std::fs::write(&p, serde_json::to_string_pretty(t).expect("truth serializes"))
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Read a dataset; attaches feature roles when a sidecar is present.
pub fn load_dataset(root: &Path) -> Result<(MultiGraphDataset, Option<GroundTruth>)> {
    let mut ds = gio::read_dataset(root)?;
    let p = root.join("ground_truth.json");
    let truth = if p.exists() {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let t: GroundTruth =
            serde_json::from_str(&text).map_err(|e| Error::parse(&p, e.to_string()))?;
        for g in ds
            .train_graphs
            .iter_mut()
            .chain(ds.val_graphs.iter_mut())
            .chain(ds.test_graphs.iter_mut())
        {
            g.roles = Some(t.roles.clone());
        }
        Some(t)
    } else {
        None
    };
    Ok((ds, truth))
}

impl GroundTruth {
    pub fn codebook_for(&self, env_id: usize) -> Option<Array2<f64>> {
        self.environments
            .iter()
            .find(|e| e.env_id == env_id)
            .map(|e| from_rows(&e.spurious_codebook))
    }
}

// ---------------------------------------------------------------------------
// Linear structural causal model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearScmConfig {
    pub num_envs: usize,
    pub samples_per_env: usize,
    pub d_inv: usize,
    pub d_spu: usize,
    /// `a_e` in `X_s = a_e * Y + noise`, one per environment.
    pub env_shift_scales: Vec<f64>,
    /// Defaults to all ones.
    pub beta: Option<Vec<f64>>,
    pub target_noise: f64,
    pub spurious_noise: f64,
    /// Off-diagonal block of the mixing matrix: observed invariant columns
    /// pick up `mixing * sum(X_s)`.
    pub mixing: f64,
    pub seed: u64,
}

impl Default for LinearScmConfig {
    fn default() -> Self {
        Self {
            num_envs: 2,
            samples_per_env: 5000,
            d_inv: 2,
            d_spu: 2,
            env_shift_scales: vec![1.0, -1.0],
            beta: None,
            target_noise: 0.5,
            spurious_noise: 0.5,
            mixing: 0.5,
            seed: 0,
        }
    }
}

/// Samples from `Y = X_i beta + eps`, `X_s = a_e Y + eta`, `X = W [X_i; X_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScmSample {
    /// Observed design matrix per environment (`N_e × d`).
    pub x: Vec<Array2<f64>>,
    /// Unmixed `[X_i, X_s]` per environment.
    pub latent: Vec<Array2<f64>>,
    pub y: Vec<Array1<f64>>,
    pub beta: Array1<f64>,
    /// `d × (d_inv + d_spu)`.
    pub w: Array2<f64>,
    /// `d_inv × d`, with `w_tilde · w = [I, 0]`.
    pub w_tilde: Array2<f64>,
    pub d_inv: usize,
    pub d_spu: usize,
    pub env_shift_scales: Vec<f64>,
    pub target_noise: f64,
}

pub fn generate_linear_scm(cfg: &LinearScmConfig) -> Result<LinearScmSample> {
    if cfg.num_envs < 2 {
        return Err(Error::Config(
            "a linear SCM needs at least 2 environments".to_string(),
        ));
    }
    if cfg.env_shift_scales.len() != cfg.num_envs {
        return Err(Error::Config(format!(
            "{} shift scales for {} environments",
            cfg.env_shift_scales.len(),
            cfg.num_envs
        )));
    }
    if cfg.d_inv == 0 {
        return Err(Error::Config("d_inv must be at least 1".to_string()));
    }
    let beta = match &cfg.beta {
        Some(b) if b.len() != cfg.d_inv => {
            return Err(Error::Config(format!(
                "beta has length {}, expected {}",
                b.len(),
                cfg.d_inv
            )))
        }
        Some(b) => Array1::from(b.clone()),
        None => Array1::ones(cfg.d_inv),
    };
    let (di, ds) = (cfg.d_inv, cfg.d_spu);
    let d = di + ds;
    let mut w = Array2::eye(d);
    w.slice_mut(s![0..di, di..d]).fill(cfg.mixing);
    let mut w_tilde = Array2::zeros((di, d));
    w_tilde.slice_mut(s![.., 0..di]).assign(&Array2::eye(di));
    w_tilde.slice_mut(s![.., di..d]).fill(-cfg.mixing);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples_per_env;
    let (mut xs, mut latents, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for &a in &cfg.env_shift_scales {
        let xi = Array2::from_shape_fn((n, di), |_| normal(&mut rng));
        let eps = Array1::from_shape_fn(n, |_| cfg.target_noise * normal(&mut rng));
        let y = xi.dot(&beta) + &eps;
        let xsp = Array2::from_shape_fn((n, ds), |(r, _)| a * y[r] + cfg.spurious_noise * normal(&mut rng));
        let latent = ndarray::concatenate(Axis(1), &[xi.view(), xsp.view()]).expect("same rows");
        let x = latent.dot(&w.t());
        xs.push(x);
        latents.push(latent);
        ys.push(y);
    }
    Ok(LinearScmSample {
        x: xs,
        latent: latents,
        y: ys,
        beta,
        w,
        w_tilde,
        d_inv: di,
        d_spu: ds,
        env_shift_scales: cfg.env_shift_scales.clone(),
        target_noise: cfg.target_noise,
    })
}
