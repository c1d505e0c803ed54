//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and whatever
//! it needs for the vector-Jacobian product. [`Tape::backward`] walks the
//! nodes once in reverse order. Nodes that do not depend on a tracked leaf
//! carry no gradient and are skipped.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Lower and upper clamp applied to probabilities inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

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
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    AddBias(Var, Var),
    MulCols(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    RowSoftmax(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    Column(Var, usize),
    Element(Var, usize),
    Reshape(Var),
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Mask(Var, Vec<f64>),
    Mse {
        pred: Var,
        target: Tensor,
    },
    Bce {
        prob: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
    Floor(Var, f64),
    QuadWindow {
        x: Var,
        lo: f64,
        hi: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// `x·W + b` with `x: [n,in]`, `W: [in,out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 2 || ws.shape().len() != 2 || xs.cols() != ws.rows() {
            return Err(Error::dim("dense", xs.shape(), ws.shape()));
        }
        if bs.len() != ws.cols() {
            return Err(Error::dim("dense bias", ws.shape(), bs.shape()));
        }
        let mut value = matmul(xs, ws)?;
        let m = value.cols();
        let bias = bs.data();
        for row in value.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(value, Op::Dense { x, w, b }, tracked))
    }

    /// Adds a length-`m` vector to every row of `x: [n,m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        if xs.shape().len() != 2 || bs.len() != xs.cols() {
            return Err(Error::dim("add_bias", xs.shape(), bs.shape()));
        }
        let m = xs.cols();
        let mut value = xs.clone();
        let bias = bs.data();
        for row in value.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(value, Op::AddBias(x, b), tracked))
    }

    /// Multiplies every row of `x: [n,m]` elementwise by a length-`m` vector.
    pub fn mul_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x), self.value(s));
        if xs.shape().len() != 2 || ss.len() != xs.cols() {
            return Err(Error::dim("mul_cols", xs.shape(), ss.shape()));
        }
        let m = xs.cols();
        let mut value = xs.clone();
        let scale = ss.data();
        for row in value.data_mut().chunks_mut(m) {
            for (o, &sv) in row.iter_mut().zip(scale) {
                *o *= sv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(value, Op::MulCols(x, s), tracked))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(name, at, bt)?;
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, c), tracked)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let tracked = self.tracked(x);
        self.push(value, Op::Offset(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let tracked = self.tracked(x);
        self.push(value, Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let tracked = self.tracked(x);
        self.push(value, Op::Sigmoid(x), tracked)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let tracked = self.tracked(x);
        self.push(value, Op::Exp(x), tracked)
    }

    /// Softmax over each row of a matrix (a vector is a single row).
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let m = xt.cols();
        let mut value = xt.clone();
        for row in value.data_mut().chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let tracked = self.tracked(x);
        self.push(value, Op::RowSoftmax(x), tracked)
    }

    /// Column sums of `x: [n,m]`, giving a length-`m` vector.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let m = xt.cols();
        let mut out = vec![0.0; m];
        for row in xt.data().chunks(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let tracked = self.tracked(x);
        self.push(Tensor::vector(out), Op::SumRows(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let value = Tensor::scalar(xt.sum() / xt.len() as f64);
        let tracked = self.tracked(x);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Joins `a: [n,p]` and `b: [n,q]` into `[n,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape().len() != 2 || bt.shape().len() != 2 || at.rows() != bt.rows() {
            return Err(Error::dim("concat_cols", at.shape(), bt.shape()));
        }
        let (n, p, q) = (at.rows(), at.cols(), bt.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(at.row(i));
            data.extend_from_slice(bt.row(i));
        }
        let value = Tensor::new(vec![n, p + q], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::ConcatCols(a, b), tracked))
    }

    /// Stacks equally long vectors (or single-row matrices) into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(Error::Usage("stack_rows needs at least one row".into()));
        };
        let m = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * m);
        let mut tracked = false;
        for &r in rows {
            let t = self.value(r);
            if t.len() != m {
                return Err(Error::dim("stack_rows", &[m], t.shape()));
            }
            data.extend_from_slice(t.data());
            tracked |= self.tracked(r);
        }
        let value = Tensor::new(vec![rows.len(), m], data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), tracked))
    }

    /// Column `j` of `x: [n,m]` as a length-`n` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 2 || j >= xt.cols() {
            return Err(Error::Index {
                what: "column",
                index: j,
                len: xt.cols(),
            });
        }
        let m = xt.cols();
        let data: Vec<f64> = xt.data().chunks(m).map(|r| r[j]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::vector(data), Op::Column(x, j), tracked))
    }

    /// Flat element `i` of `x` as a scalar.
    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        let xt = self.value(x);
        if i >= xt.len() {
            return Err(Error::Index {
                what: "element",
                index: i,
                len: xt.len(),
            });
        }
        let value = Tensor::scalar(xt.data()[i]);
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Element(x, i), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Per-column standardisation by batch mean and biased variance.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xt = self.value(x);
        let (n, m) = (xt.rows(), xt.cols());
        if xt.shape().len() != 2 || n < 2 {
            return Err(Error::BatchSize {
                op: "batchnorm",
                got: n,
                need: 2,
            });
        }
        let mut mean = vec![0.0; m];
        for row in xt.data().chunks(m) {
            for (mu, &v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= n as f64);
        let mut var = vec![0.0; m];
        for row in xt.data().chunks(m) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut value = xt.clone();
        for row in value.data_mut().chunks_mut(m) {
            for ((v, &mu), &r) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - mu) * r;
            }
        }
        let tracked = self.tracked(x);
        let out = self.push(value, Op::Normalize { x, inv_std }, tracked);
        Ok((out, mean, var))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if mask.len() != xt.len() {
            return Err(Error::dim("mask", xt.shape(), &[mask.len()]));
        }
        let mut value = xt.clone();
        for (v, &k) in value.data_mut().iter_mut().zip(&mask) {
            *v *= k;
        }
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Mask(x, mask), tracked))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::dim("mse", p.shape(), target.shape()));
        }
        let n = p.len().max(1) as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            tracked,
        ))
    }

    /// Weighted binary cross-entropy, averaged over the batch.
    ///
    /// Labels may be fractional. Probabilities are clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, prob: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let p = self.value(prob);
        if p.len() != labels.len() || p.len() != weights.len() {
            return Err(Error::dim("bce", p.shape(), &[labels.len(), weights.len()]));
        }
        let n = p.len().max(1) as f64;
        let mut loss = 0.0;
        for ((&pv, &y), &w) in p.data().iter().zip(labels).zip(weights) {
            let q = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        }
        let tracked = self.tracked(prob);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::Bce {
                prob,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            tracked,
        ))
    }

    /// `max(floor, x)` with unit subgradient at the kink.
    pub fn floor_at(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor));
        let tracked = self.tracked(x);
        self.push(value, Op::Floor(x, floor), tracked)
    }

    /// Concave quadratic equal to 1 at the window centre and 0 at both ends.
    pub fn quad_window(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| quad_window(v, lo, hi));
        let tracked = self.tracked(x);
        self.push(value, Op::QuadWindow { x, lo, hi }, tracked)
    }

    /// `Σ cᵢ·xᵢ` over scalars, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        let mut tracked = false;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("weighted_sum", t.shape(), &[]));
            }
            total += c * t.item();
            tracked |= self.tracked(v);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::Dense { x, w, b } => {
                if self.tracked(*x) {
                    self.accumulate(grads, *x, matmul_nt(g, self.value(*w)));
                }
                if self.tracked(*w) {
                    self.accumulate(grads, *w, matmul_tn(self.value(*x), g));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::MulCols(x, s) => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let m = xt.cols();
                if self.tracked(*x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(m) {
                        for (v, &sv) in row.iter_mut().zip(st.data()) {
                            *v *= sv;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.tracked(*s) {
                    let mut gs = vec![0.0; m];
                    for (grow, xrow) in gd.chunks(m).zip(xt.data().chunks(m)) {
                        for ((o, &gv), &xv) in gs.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(
                        grads,
                        *s,
                        Tensor::vector(gs).reshape(st.shape().to_vec()).unwrap(),
                    );
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    self.accumulate(grads, *a, elementwise(g, bt, |gv, bv| gv * bv));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, elementwise(g, at, |gv, av| gv * av));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xt = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    elementwise(g, xt, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Sigmoid(x) => {
                self.accumulate(
                    grads,
                    *x,
                    elementwise(g, &node.value, |gv, s| gv * s * (1.0 - s)),
                );
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, elementwise(g, &node.value, |gv, e| gv * e));
            }
            Op::RowSoftmax(x) => {
                let s = &node.value;
                let m = s.cols();
                let mut gx = g.clone();
                for (grow, srow) in gx.data_mut().chunks_mut(m).zip(s.data().chunks(m)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                    for (gv, &sv) in grow.iter_mut().zip(srow) {
                        *gv = sv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumRows(x) => {
                let xt = self.value(*x);
                let m = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for row in gx.data_mut().chunks_mut(m) {
                    row.copy_from_slice(gd);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                let shape = xt.shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0] / xt.len() as f64));
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                for row in gd.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(sa, ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(sb, gb).unwrap());
            }
            Op::StackRows(rows) => {
                let m = node.value.cols();
                for (r, chunk) in rows.iter().zip(gd.chunks(m)) {
                    if self.tracked(*r) {
                        let shape = self.value(*r).shape().to_vec();
                        self.accumulate(grads, *r, Tensor::new(shape, chunk.to_vec()).unwrap());
                    }
                }
            }
            Op::Column(x, j) => {
                let xt = self.value(*x);
                let m = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (row, &gv) in gx.data_mut().chunks_mut(m).zip(gd) {
                    row[*j] = gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Element(x, i) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                gx.data_mut()[*i] = gd[0];
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape).unwrap());
            }
            Op::Normalize { x, inv_std } => {
                let y = &node.value;
                let (n, m) = (y.rows(), y.cols());
                let mut sum_g = vec![0.0; m];
                let mut sum_gy = vec![0.0; m];
                for (grow, yrow) in gd.chunks(m).zip(y.data().chunks(m)) {
                    for j in 0..m {
                        sum_g[j] += grow[j];
                        sum_gy[j] += grow[j] * yrow[j];
                    }
                }
                let nf = n as f64;
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(m).zip(y.data().chunks(m)) {
                    for j in 0..m {
                        grow[j] = inv_std[j] / nf * (nf * grow[j] - sum_g[j] - yrow[j] * sum_gy[j]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mask(x, mask) => {
                let mut gx = g.clone();
                for (v, &k) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= k;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = p.len().max(1) as f64;
                let gp = elementwise(p, target, |a, b| 2.0 * (a - b) / n * gd[0]);
                self.accumulate(grads, *pred, gp);
            }
            Op::Bce {
                prob,
                labels,
                weights,
            } => {
                let p = self.value(*prob);
                let n = p.len().max(1) as f64;
                let data = p
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&pv, &y), &w)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                            return 0.0;
                        }
                        gd[0] * w * (pv - y) / (pv * (1.0 - pv)) / n
                    })
                    .collect();
                self.accumulate(grads, *prob, Tensor::new(p.shape().to_vec(), data).unwrap());
            }
            Op::Floor(x, floor) => {
                let xt = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    elementwise(g, xt, |gv, xv| if xv >= *floor { gv } else { 0.0 }),
                );
            }
            Op::QuadWindow { x, lo, hi } => {
                let xt = self.value(*x);
                let w2 = (hi - lo) * (hi - lo);
                self.accumulate(
                    grads,
                    *x,
                    elementwise(g, xt, |gv, xv| gv * (-4.0 * (2.0 * xv - lo - hi) / w2)),
                );
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(
                        grads,
                        v,
                        Tensor::scalar(c * gd[0])
                            .reshape(self.value(v).shape().to_vec())
                            .unwrap(),
                    );
                }
            }
        }
    }
}

/// `−4(x−lo)(x−hi)/(hi−lo)²`.
pub fn quad_window(x: f64, lo: f64, hi: f64) -> f64 {
    -4.0 * (x - lo) * (x - hi) / ((hi - lo) * (hi - lo))
}

fn column_sums(g: &Tensor) -> Tensor {
    let m = g.cols();
    let mut out = vec![0.0; m];
    for row in g.data().chunks(m) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}
