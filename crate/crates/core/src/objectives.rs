//! Scalar training objectives.
//!
//! Tape-level functions build differentiable graphs; the `*_value`
//! variants evaluate the same formulas on plain arrays.
//!
//! Per-node loss vectors are `N×1` columns over the nodes already selected
//! by a mask; loss tables over views or environments are `N×K`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Environments whose total assignment weight is below this contribute
/// nothing to the invariance penalty.
pub const EMPTY_ENV_WEIGHT: f64 = 1e-6;

/// Per-node cross-entropy, `N×1`. A single score column is read as a
/// binary logit.
pub fn node_ce(tape: &mut Tape, scores: Var, labels: &[usize]) -> Var {
    let (n, c) = tape.shape(scores);
    assert_eq!(n, labels.len(), "one label per score row");
    let s = if c == 1 {
        let zero = tape.constant(Array2::zeros((n, 1)));
        tape.concat_cols(&[zero, scores])
    } else {
        scores
    };
    let ls = tape.log_softmax_rows(s);
    let picked = tape.pick_per_row(ls, labels.to_vec());
    tape.neg(picked)
}

fn masked(mask: &[bool]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::Input("mask selects no nodes".into()));
    }
    Ok(idx)
}

/// Mean cross-entropy over masked nodes.
pub fn erm_risk(tape: &mut Tape, scores: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
    if mask.len() != labels.len() {
        return Err(Error::Shape(format!(
            "mask length {} against {} labels",
            mask.len(),
            labels.len()
        )));
    }
    let idx = masked(mask)?;
    let s = tape.gather_rows(scores, idx.clone());
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let l = node_ce(tape, s, &y);
    Ok(tape.mean_all(l))
}

pub fn erm_risk_value(scores: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let mut t = Tape::new();
    let s = t.constant(scores.clone());
    let r = erm_risk(&mut t, s, labels, mask)?;
    Ok(t.scalar(r))
}

/// `(1/n) Σ_v ρ[v,k] · loss[v]`.
pub fn weighted_env_risk(tape: &mut Tape, loss: Var, rho: Var, k: usize) -> Result<Var> {
    let (n, kk) = tape.shape(rho);
    if k >= kk {
        return Err(Error::Index(format!("environment {k} with K={kk}")));
    }
    if tape.shape(loss) != (n, 1) {
        return Err(Error::Shape(format!(
            "loss vector {:?} against {n} assignment rows",
            tape.shape(loss)
        )));
    }
    let col = column(tape, rho, k);
    let w = tape.mul(col, loss);
    let s = tape.sum_all(w);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Column `k` of a matrix as an `N×1` differentiable slice.
pub fn column(tape: &mut Tape, a: Var, k: usize) -> Var {
    let c = tape.shape(a).1;
    let mut sel = Array2::zeros((c, 1));
    sel[[k, 0]] = 1.0;
    let sel = tape.constant(sel);
    tape.matmul(a, sel)
}

/// `Σ_k [R^k(c) − R^k(c_k)]` under the soft assignment `rho`.
pub fn invariance_penalty(tape: &mut Tape, loss_shared: Var, loss_envs: &[Var], rho: Var) -> Result<Var> {
    let kk = tape.shape(rho).1;
    if loss_envs.len() != kk {
        return Err(Error::Shape(format!(
            "{} environment classifiers against K={kk}",
            loss_envs.len()
        )));
    }
    let totals = tape.value(rho).sum_axis(Axis(0));
    let mut acc = tape.scalar_const(0.0);
    for k in 0..kk {
        if totals[k] < EMPTY_ENV_WEIGHT {
            continue;
        }
        let shared = weighted_env_risk(tape, loss_shared, rho, k)?;
        let own = weighted_env_risk(tape, loss_envs[k], rho, k)?;
        let gap = tape.sub(shared, own);
        acc = tape.add(acc, gap);
    }
    Ok(acc)
}

pub fn invariance_penalty_value(
    loss_shared: &Array2<f64>,
    loss_envs: &[Array2<f64>],
    rho: &Array2<f64>,
) -> Result<f64> {
    let mut t = Tape::new();
    let s = t.constant(loss_shared.clone());
    let e: Vec<Var> = loss_envs.iter().map(|l| t.constant(l.clone())).collect();
    let r = t.constant(rho.clone());
    let p = invariance_penalty(&mut t, s, &e, r)?;
    Ok(t.scalar(p))
}

fn check_hsic_rows(n: usize, m: usize) -> Result<()> {
    if n != m {
        return Err(Error::Shape(format!("HSIC inputs have {n} and {m} rows")));
    }
    if n < 4 {
        return Err(Error::Input(format!("HSIC needs at least 4 rows, got {n}")));
    }
    Ok(())
}

/// Linear-kernel HSIC, `||Xcᵀ Yc||_F² / (n−1)²`.
pub fn hsic(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let n = tape.shape(x).0;
    check_hsic_rows(n, tape.shape(y).0)?;
    let xc = tape.center_cols(x);
    let yc = tape.center_cols(y);
    let xt = tape.transpose(xc);
    let cross = tape.matmul(xt, yc);
    let sq = tape.square(cross);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / ((n - 1) * (n - 1)) as f64))
}

/// `HSIC(X,Y) / sqrt(HSIC(X,X) HSIC(Y,Y))`, in `[0, 1]`.
pub fn hsic_normalized(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let xy = hsic(tape, x, y)?;
    let xx = hsic(tape, x, x)?;
    let yy = hsic(tape, y, y)?;
    for (name, v) in [("first", xx), ("second", yy)] {
        let s = tape.scalar(v);
        if s.is_nan() || s <= 0.0 {
            return Err(Error::Degenerate(format!(
                "{name} argument of normalized HSIC is constant"
            )));
        }
    }
    let prod = tape.mul(xx, yy);
    let den = tape.sqrt(prod);
    Ok(tape.div(xy, den))
}

pub fn hsic_value(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(y.clone()));
    let h = hsic(&mut t, a, b)?;
    Ok(t.scalar(h))
}

pub fn hsic_normalized_value(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(y.clone()));
    let h = hsic_normalized(&mut t, a, b)?;
    Ok(t.scalar(h))
}

/// Node-by-environment loss table.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub values: Array2<f64>,
    pub node_mask: Vec<bool>,
}

impl LossMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        let n = values.nrows();
        Self {
            values,
            node_mask: vec![true; n],
        }
    }

    fn selected(&self) -> Result<Array2<f64>> {
        if self.node_mask.len() != self.values.nrows() {
            return Err(Error::Shape("node_mask length differs from row count".into()));
        }
        let idx = masked(&self.node_mask)?;
        Ok(self.values.select(Axis(0), &idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariancePenalty {
    Vrex,
    Nvrex,
}

fn check_k(tape: &Tape, l: Var) -> Result<()> {
    let k = tape.shape(l).1;
    if k < 2 {
        return Err(Error::Config(format!(
            "variance penalties need K >= 2, got {k}"
        )));
    }
    Ok(())
}

/// Variance over environments of the mean loss (population variance).
pub fn vrex(tape: &mut Tape, l: Var) -> Result<Var> {
    check_k(tape, l)?;
    let means = tape.mean_rows(l);
    let grand = tape.mean_all(means);
    let dev = tape.sub(means, grand);
    let sq = tape.square(dev);
    Ok(tape.mean_all(sq))
}

/// Mean over nodes of the per-node variance across environments.
pub fn nvrex(tape: &mut Tape, l: Var) -> Result<Var> {
    check_k(tape, l)?;
    let row_means = tape.mean_cols(l);
    let dev = tape.sub(l, row_means);
    let sq = tape.square(dev);
    Ok(tape.mean_all(sq))
}

pub fn variance_penalty(tape: &mut Tape, kind: VariancePenalty, l: Var) -> Result<Var> {
    match kind {
        VariancePenalty::Vrex => vrex(tape, l),
        VariancePenalty::Nvrex => nvrex(tape, l),
    }
}

pub fn vrex_value(l: &LossMatrix) -> Result<f64> {
    let mut t = Tape::new();
    let v = t.constant(l.selected()?);
    let r = vrex(&mut t, v)?;
    Ok(t.scalar(r))
}

pub fn nvrex_value(l: &LossMatrix) -> Result<f64> {
    let mut t = Tape::new();
    let v = t.constant(l.selected()?);
    let r = nvrex(&mut t, v)?;
    Ok(t.scalar(r))
}

/// `R(c, Φ) + λ · P_inv`.
pub fn partition_objective(tape: &mut Tape, erm: Var, penalty: Var, lambda: f64) -> Var {
    let p = tape.scale(penalty, lambda);
    tape.add(erm, p)
}

/// Reconstruction MSE plus `η` times normalized HSIC between the two
/// representations.
pub fn disentangle_loss(
    tape: &mut Tape,
    reconstruction: Var,
    x: Var,
    h_e: Var,
    h_i: Var,
    eta: f64,
) -> Result<Var> {
    if tape.shape(reconstruction) != tape.shape(x) {
        return Err(Error::Shape(format!(
            "reconstruction {:?} against features {:?}",
            tape.shape(reconstruction),
            tape.shape(x)
        )));
    }
    let d = tape.sub(reconstruction, x);
    let sq = tape.square(d);
    let mse = tape.mean_all(sq);
    if eta == 0.0 {
        return Ok(mse);
    }
    let h = hsic_normalized(tape, h_e, h_i)?;
    let h = tape.scale(h, eta);
    Ok(tape.add(mse, h))
}

/// Mean over views `k` of the cross-entropy between `softmax(logits_k)`
/// and target environment `k`.
pub fn extrapolation_loss(tape: &mut Tape, view_logits: &[Var]) -> Result<Var> {
    let k = view_logits.len();
    if k == 0 {
        return Err(Error::Config("no views".into()));
    }
    let mut acc = tape.scalar_const(0.0);
    for (target, &logits) in view_logits.iter().enumerate() {
        let (n, width) = tape.shape(logits);
        if width != k {
            return Err(Error::Config(format!(
                "{k} views but the environment classifier has {width} outputs"
            )));
        }
        let l = node_ce(tape, logits, &vec![target; n]);
        let m = tape.mean_all(l);
        acc = tape.add(acc, m);
    }
    Ok(tape.scale(acc, 1.0 / k as f64))
}

/// Mean multi-view risk plus `β` times a variance penalty over views.
/// `view_losses` are per-node `N×1` losses, one per view.
pub fn dynamic_objective(
    tape: &mut Tape,
    view_losses: &[Var],
    beta: f64,
    penalty: VariancePenalty,
) -> Result<Var> {
    let l = tape.concat_cols(view_losses);
    let mean = tape.mean_all(l);
    if beta == 0.0 {
        return Ok(mean);
    }
    let v = variance_penalty(tape, penalty, l)?;
    let v = tape.scale(v, beta);
    Ok(tape.add(mean, v))
}

/// `R + λ P_inv + L_d`.
pub fn combined_objective(tape: &mut Tape, erm: Var, penalty: Var, dynamic: Var, lambda: f64) -> Var {
    let ls = partition_objective(tape, erm, penalty, lambda);
    tape.add(ls, dynamic)
}
