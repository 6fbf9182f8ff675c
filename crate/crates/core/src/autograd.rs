//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a `1×1` node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that was created
//! with [`Tape::param`] (or depends on one). Nodes built only from constants
//! are never visited during the backward pass.
//!
//! Element-wise binary operations broadcast an operand along any axis of
//! length one, so a `1×H` bias adds to an `N×H` activation and an `N×1`
//! column scales every row.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LogSoftmaxRows(Var),
    WeightedSoftmaxRows(Var, Var),
    PickPerRow(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CenterCols(Var),
    ScatterSym {
        src: Var,
        pairs: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for `v`, or `None` if `v` does not influence the loss through
    /// any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    match (a, b) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => panic!("cannot broadcast dimensions {a} and {b}"),
    }
}

/// Sum `g` down to `target` along broadcast axes.
fn reduce_to(g: Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let mut out = g;
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise `w * exp(x - max)` and the per-row normalizer.
fn weighted_exp_rows(x: &Array2<f64>, w: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut e = Array2::zeros(x.raw_dim());
    let mut z = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let mut m = f64::NEG_INFINITY;
        for j in 0..x.ncols() {
            if w[[i, j]] > 0.0 {
                m = m.max(x[[i, j]]);
            }
        }
        if !m.is_finite() {
            m = 0.0;
        }
        let mut s = 0.0;
        for j in 0..x.ncols() {
            let v = (x[[i, j]] - m).exp();
            e[[i, j]] = v;
            s += w[[i, j]] * v;
        }
        z.push(s);
    }
    (e, z)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(shape(a), (1, 1), "scalar() on a non-scalar node");
        a[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            shape(va),
            shape(vb)
        );
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn binary_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        (broadcast_dim(sa.0, sb.0), broadcast_dim(sa.1, sb.1))
    }

    fn broadcast_value(&self, v: Var, to: (usize, usize)) -> Array2<f64> {
        self.value(v)
            .broadcast(to)
            .expect("broadcast checked")
            .to_owned()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_shape(a, b);
        let out = self.broadcast_value(a, s) + &self.value(b).broadcast(s).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_shape(a, b);
        let out = self.broadcast_value(a, s) - &self.value(b).broadcast(s).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_shape(a, b);
        let out = self.broadcast_value(a, s) * &self.value(b).broadcast(s).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let s = self.binary_shape(a, b);
        let out = self.broadcast_value(a, s) / &self.value(b).broadcast(s).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) + s;
        let ng = self.ng(a);
        self.push(out, Op::Shift(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .mapv(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Ln(a), ng)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).mapv(|v| v.powf(p));
        let ng = self.ng(a);
        self.push(out, Op::Powf(a, p), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.powf(a, 0.5)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `r×c -> 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Sum over columns: `r×c -> r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.shape(a).1 as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ls = self.log_softmax_rows(a);
        self.exp(ls)
    }

    /// Row-wise softmax where each entry is additionally weighted:
    /// `p_ij = w_ij exp(x_ij) / sum_l w_il exp(x_il)`. Rows with zero total
    /// weight produce zeros. Gradients flow into both `logits` and `weights`.
    pub fn weighted_softmax_rows(&mut self, logits: Var, weights: Var) -> Var {
        assert_eq!(self.shape(logits), self.shape(weights));
        let (e, z) = weighted_exp_rows(self.value(logits), self.value(weights));
        let w = self.value(weights);
        let mut out = Array2::zeros(e.raw_dim());
        for i in 0..e.nrows() {
            if z[i] > 0.0 {
                for j in 0..e.ncols() {
                    out[[i, j]] = w[[i, j]] * e[[i, j]] / z[i];
                }
            }
        }
        let ng = self.ng(logits) || self.ng(weights);
        self.push(out, Op::WeightedSoftmaxRows(logits, weights), ng)
    }

    /// `out[i, 0] = a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), idx.len());
        let out = Array2::from_shape_fn((idx.len(), 1), |(i, _)| x[[i, idx[i]]]);
        let ng = self.ng(a);
        self.push(out, Op::PickPerRow(a, idx), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Subtract each column's mean.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let out = x - &mean;
        let ng = self.ng(a);
        self.push(out, Op::CenterCols(a), ng)
    }

    /// Scatter a `1×m` row of values into a symmetric `n×n` matrix at the
    /// given off-diagonal pairs; every other entry is zero.
    pub fn scatter_sym(&mut self, src: Var, pairs: Vec<(usize, usize)>, n: usize) -> Var {
        let v = self.value(src);
        assert_eq!(shape(v), (1, pairs.len()));
        let mut out = Array2::zeros((n, n));
        for (k, &(i, j)) in pairs.iter().enumerate() {
            assert!(i != j, "scatter_sym on the diagonal");
            out[[i, j]] = v[[0, k]];
            out[[j, i]] = v[[0, k]];
        }
        let ng = self.ng(src);
        self.push(out, Op::ScatterSym { src, pairs }, ng)
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward() needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        let accum = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| match &mut grads
            [v.0]
        {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, reduce_to(g.clone(), self.shape(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, reduce_to(-&g, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    let s = shape(&g);
                    if self.ng(*a) {
                        let gb = &g * &self.value(*b).broadcast(s).unwrap();
                        accum(&mut grads, *a, reduce_to(gb, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        let ga = &g * &self.value(*a).broadcast(s).unwrap();
                        accum(&mut grads, *b, reduce_to(ga, self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    let s = shape(&g);
                    let bb = self.value(*b).broadcast(s).unwrap();
                    if self.ng(*a) {
                        let ga = &g / &bb;
                        accum(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    }
                    if self.ng(*b) {
                        let gb = -(&g * y) / &bb;
                        accum(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, s) => accum(&mut grads, *a, g * *s),
                Op::Shift(a) => accum(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = y.mapv(|t| 1.0 - t * t);
                    accum(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accum(&mut grads, *a, g * d);
                }
                Op::LeakyRelu(a, slope) => {
                    let d = self
                        .value(*a)
                        .mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    accum(&mut grads, *a, g * d);
                }
                Op::Exp(a) => accum(&mut grads, *a, g * y),
                Op::Ln(a) => {
                    let ga = g / self.value(*a);
                    accum(&mut grads, *a, ga);
                }
                Op::Powf(a, p) => {
                    let d = self.value(*a).mapv(|x| p * x.powf(p - 1.0));
                    accum(&mut grads, *a, g * d);
                }
                Op::Transpose(a) => accum(&mut grads, *a, g.t().to_owned()),
                Op::SumAll(a) => {
                    let s = self.shape(*a);
                    accum(&mut grads, *a, Array2::from_elem(s, g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let s = self.shape(*a);
                    accum(&mut grads, *a, g.broadcast(s).unwrap().to_owned());
                }
                Op::SumCols(a) => {
                    let s = self.shape(*a);
                    accum(&mut grads, *a, g.broadcast(s).unwrap().to_owned());
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = y.mapv(f64::exp);
                    let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(sm * &gs);
                    accum(&mut grads, *a, ga);
                }
                Op::WeightedSoftmaxRows(logits, weights) => {
                    // y = p; inner_i = sum_l p_il g_il
                    let inner = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let centered = &g - &inner;
                    if self.ng(*logits) {
                        accum(&mut grads, *logits, y * &centered);
                    }
                    if self.ng(*weights) {
                        let (e, z) =
                            weighted_exp_rows(self.value(*logits), self.value(*weights));
                        let mut gw = Array2::zeros(e.raw_dim());
                        for i in 0..e.nrows() {
                            if z[i] > 0.0 {
                                for j in 0..e.ncols() {
                                    gw[[i, j]] = e[[i, j]] / z[i] * centered[[i, j]];
                                }
                            }
                        }
                        accum(&mut grads, *weights, gw);
                    }
                }
                Op::PickPerRow(a, cols) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (i, &c) in cols.iter().enumerate() {
                        ga[[i, c]] = g[[i, 0]];
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.ng(p) {
                            let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                            accum(&mut grads, p, slice);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.ng(p) {
                            let slice = g.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                            accum(&mut grads, p, slice);
                        }
                        offset += h;
                    }
                }
                Op::CenterCols(a) => {
                    let mean = g.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
                    accum(&mut grads, *a, &g - &mean);
                }
                Op::ScatterSym { src, pairs } => {
                    let mut gs = Array2::zeros((1, pairs.len()));
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        gs[[0, k]] = g[[i, j]] + g[[j, i]];
                    }
                    accum(&mut grads, *src, gs);
                }
            }
        }
        Grads { grads }
    }
}

/// Softmax of a plain matrix, row-wise, outside any tape.
pub fn softmax(x: &Array2<f64>) -> Array2<f64> {
    softmax_rows(x)
}
