//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Leaves are either
//! trainable (gradient flows into them) or constant. [`Graph::detach`] copies a
//! node's value into a fresh constant leaf, which is how stop-gradient is
//! expressed: nothing upstream of a detached node can receive gradient through
//! it.
//!
//! The op set is exactly what the model, the confidence estimator and the
//! losses need. Cross-entropy and binary cross-entropy are fused ops so their
//! flooring conventions live in one place.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor used by every cross-entropy in the crate.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Tanh,
    Identity,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Tensor<T>),
    Act(NodeId, Activation),
    Softmax(NodeId),
    CrossEntropy(NodeId, Tensor<T>),
    Bce(NodeId, Tensor<T>),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Squash(NodeId, T),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
    BatchNorm { input: NodeId, inv_std: Vec<T> },
    AffineConst { input: NodeId, inv_std: Vec<T> },
    RowCosine(NodeId, NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameter name → leaf id, produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
    trainable: BTreeSet<String>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cross-entropy `−Σ q log p̃` where `p̃ = max(p, floor) / Σ max(p, floor)`.
pub fn floored_cross_entropy<T: Scalar>(q: &[T], p: &[T]) -> T {
    let floor = T::lit(LOG_FLOOR);
    let s: T = p.iter().map(|&v| v.max(floor)).sum();
    let q_sum: T = q.iter().copied().sum();
    let mut acc = T::zero();
    for (&qy, &py) in q.iter().zip(p) {
        if qy != T::zero() {
            acc = acc - qy * py.max(floor).ln();
        }
    }
    acc + q_sum * s.ln()
}

/// Binary cross-entropy with the convention `0 · log 0 = 0`.
pub fn binary_cross_entropy<T: Scalar>(target: T, c: T) -> T {
    let floor = T::lit(LOG_FLOOR);
    let c = c.max(floor).min(T::one() - floor);
    let mut acc = T::zero();
    if target != T::zero() {
        acc = acc - target * c.ln();
    }
    let rest = T::one() - target;
    if rest != T::zero() {
        acc = acc - rest * (T::one() - c).ln();
    }
    acc
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Maps ℝ into the open interval `(δ, 1 − δ)`; `squash(0) = ½` exactly.
pub fn squash<T: Scalar>(x: T, delta: T) -> T {
    let half = T::lit(0.5);
    half + (T::one() - delta - delta) * (sigmoid(x) - half)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    softmax_row(logits, &mut out);
    out
}

fn col_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); t.cols()];
    for row in t.iter_rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::row_vector(out)
}

const COSINE_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Binds every parameter of `store` as a leaf. Names for which `frozen`
    /// returns true become constants.
    pub fn bind(&mut self, store: &ParamStore<T>, frozen: impl Fn(&str) -> bool) -> Bound {
        let mut bound = Bound::default();
        for (name, value) in store.iter() {
            let is_frozen = frozen(name);
            let id = if is_frozen {
                self.constant(value.clone())
            } else {
                bound.trainable.insert(name.to_string());
                self.variable(value.clone())
            };
            bound.ids.insert(name.to_string(), id);
        }
        bound
    }

    /// Stop-gradient: a constant leaf carrying `id`'s value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.shape(), (1, av.cols()), "bias shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(v, Op::AddBias(a, bias), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: NodeId, gamma: NodeId) -> NodeId {
        let (av, gv) = (self.value(a), self.value(gamma));
        assert_eq!(gv.shape(), (1, av.cols()), "row scale shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, &g) in v.row_mut(r).iter_mut().zip(gv.data()) {
                *o = *o * g;
            }
        }
        let rg = self.rg(&[a, gamma]);
        self.push(v, Op::MulRow(a, gamma), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor<T>) -> NodeId {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Act(a, act), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            softmax_row(av.row(r), v.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Per-row floored cross-entropy `H(q_r, p_r)` against constant targets;
    /// returns an `n × 1` column.
    pub fn cross_entropy_rows(&mut self, p: NodeId, targets: Tensor<T>) -> NodeId {
        let pv = self.value(p);
        assert_eq!(pv.shape(), targets.shape(), "cross-entropy shape mismatch");
        let losses: Vec<T> = (0..pv.rows())
            .map(|r| floored_cross_entropy(targets.row(r), pv.row(r)))
            .collect();
        let rg = self.rg(&[p]);
        self.push(Tensor::column(losses), Op::CrossEntropy(p, targets), rg)
    }

    /// Per-row binary cross-entropy of an `n × 1` column against constant
    /// targets in `[0, 1]`.
    pub fn bce_rows(&mut self, c: NodeId, targets: Tensor<T>) -> NodeId {
        let cv = self.value(c);
        assert_eq!(cv.shape(), targets.shape(), "bce shape mismatch");
        let v = cv.zip_map(&targets, |c, g| binary_cross_entropy(g, c));
        let rg = self.rg(&[c]);
        self.push(v, Op::Bce(c, targets), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    /// Mean of all entries as a `1 × 1` node. The mean of an empty tensor is 0.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = if av.is_empty() {
            T::zero()
        } else {
            av.sum() / T::from_usize(av.len()).expect("length fits")
        };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    /// `δ + (1 − 2δ)·sigmoid(a)`.
    pub fn squash(&mut self, a: NodeId, delta: T) -> NodeId {
        let v = self.value(a).map(|x| squash(x, delta));
        let rg = self.rg(&[a]);
        self.push(v, Op::Squash(a, delta), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = Tensor::hstack(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, end);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    /// Column-wise standardization with batch statistics (biased variance).
    /// Returns the normalized node together with the batch mean and variance.
    pub fn batch_norm(&mut self, a: NodeId, eps: T) -> (NodeId, Vec<T>, Vec<T>) {
        let av = self.value(a);
        let (n, d) = av.shape();
        let nf = T::from_usize(n.max(1)).expect("batch size fits");
        let mut mean = vec![T::zero(); d];
        for row in av.iter_rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m = *m + x;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / nf;
        }
        let mut var = vec![T::zero(); d];
        for row in av.iter_rows() {
            for ((s, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (x - m) * (x - m);
            }
        }
        for s in var.iter_mut() {
            *s = *s / nf;
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut v = av.clone();
        for r in 0..n {
            for ((o, &m), &is) in v.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let rg = self.rg(&[a]);
        let id = self.push(v, Op::BatchNorm { input: a, inv_std }, rg);
        (id, mean, var)
    }

    /// `(a − mean) · inv_std` with constant per-column statistics.
    pub fn normalize_const(&mut self, a: NodeId, mean: &[T], inv_std: Vec<T>) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for ((o, &m), &is) in v.row_mut(r).iter_mut().zip(mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::AffineConst { input: a, inv_std }, rg)
    }

    /// Row-wise cosine similarity; returns an `n × 1` column.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "cosine shape mismatch");
        let eps = T::lit(COSINE_EPS);
        let vals: Vec<T> = av
            .iter_rows()
            .zip(bv.iter_rows())
            .map(|(x, y)| {
                let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt().max(eps);
                let ny = y.iter().map(|&q| q * q).sum::<T>().sqrt().max(eps);
                dot / (nx * ny)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::column(vals), Op::RowCosine(a, b), rg)
    }

    /// Reverse pass from a `1 × 1` node. Returns one optional gradient per
    /// node; nodes that do not require grad get `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                context: "backward".into(),
                expected: "1x1".into(),
                found: format!("{}x{}", lv.rows(), lv.cols()),
            });
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFiniteLoss("graph output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let g = dy.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let g = self.value(*a).t_matmul(dy);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, col_sums(dy));
                }
            }
            Op::MulRow(a, g) => {
                let (av, gv) = (self.value(*a), self.value(*g));
                if self.requires_grad(*a) {
                    let mut da = dy.clone();
                    for r in 0..da.rows() {
                        for (o, &s) in da.row_mut(r).iter_mut().zip(gv.data()) {
                            *o = *o * s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*g) {
                    let prod = dy.zip_map(av, |d, x| d * x);
                    self.accumulate(grads, *g, col_sums(&prod));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|d| -d));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let g = dy.zip_map(self.value(*b), |d, y| d * y);
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let g = dy.zip_map(self.value(*a), |d, x| d * x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, dy.map(|d| d * s));
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, dy.zip_map(c, |d, k| d * k));
            }
            Op::Act(a, act) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut g = dy.clone();
                for ((o, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o = *o * act.derivative(xv, yv);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::CrossEntropy(p, q) => {
                let pv = self.value(*p);
                let floor = T::lit(LOG_FLOOR);
                let mut g = Tensor::zeros(pv.rows(), pv.cols());
                for r in 0..pv.rows() {
                    let pr = pv.row(r);
                    let qr = q.row(r);
                    let s: T = pr.iter().map(|&v| v.max(floor)).sum();
                    let q_sum: T = qr.iter().copied().sum();
                    let d = dy.get(r, 0);
                    for ((o, &py), &qy) in g.row_mut(r).iter_mut().zip(pr).zip(qr) {
                        if py >= floor {
                            *o = d * (q_sum / s - qy / py);
                        }
                    }
                }
                self.accumulate(grads, *p, g);
            }
            Op::Bce(c, t) => {
                let cv = self.value(*c);
                let floor = T::lit(LOG_FLOOR);
                let mut g = Tensor::zeros(cv.rows(), cv.cols());
                for ((o, (&x, &tgt)), &d) in g
                    .data_mut()
                    .iter_mut()
                    .zip(cv.data().iter().zip(t.data()))
                    .zip(dy.data())
                {
                    if x > floor && x < T::one() - floor {
                        *o = d * (-tgt / x + (T::one() - tgt) / (T::one() - x));
                    }
                }
                self.accumulate(grads, *c, g);
            }
            Op::Log(a) => {
                let g = dy.zip_map(self.value(*a), |d, x| d / x);
                self.accumulate(grads, *a, g);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                if !av.is_empty() {
                    let n = T::from_usize(av.len()).expect("length fits");
                    let g = Tensor::full(av.rows(), av.cols(), dy.item() / n);
                    self.accumulate(grads, *a, g);
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), dy.item()));
            }
            Op::Squash(a, delta) => {
                let span = T::one() - *delta - *delta;
                let g = dy.zip_map(self.value(*a), |d, x| {
                    let s = sigmoid(x);
                    d * span * s * (T::one() - s)
                });
                self.accumulate(grads, *a, g);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut ga = Tensor::zeros(dy.rows(), ca);
                let mut gb = Tensor::zeros(dy.rows(), cb);
                for r in 0..dy.rows() {
                    let row = dy.row(r);
                    ga.row_mut(r).copy_from_slice(&row[..ca]);
                    gb.row_mut(r).copy_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut g = Tensor::zeros(av.rows(), av.cols());
                for r in 0..dy.rows() {
                    g.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, *a, g);
            }
            Op::BatchNorm { input, inv_std } => {
                let xhat = &node.value;
                let (n, d) = xhat.shape();
                let nf = T::from_usize(n.max(1)).expect("batch size fits");
                let mut sum_dy = vec![T::zero(); d];
                let mut sum_dy_xhat = vec![T::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        sum_dy[c] = sum_dy[c] + dy.get(r, c);
                        sum_dy_xhat[c] = sum_dy_xhat[c] + dy.get(r, c) * xhat.get(r, c);
                    }
                }
                let mut g = Tensor::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        let v = (nf * dy.get(r, c) - sum_dy[c] - xhat.get(r, c) * sum_dy_xhat[c])
                            * inv_std[c]
                            / nf;
                        g.set(r, c, v);
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::AffineConst { input, inv_std } => {
                let mut g = dy.clone();
                for r in 0..g.rows() {
                    for (o, &is) in g.row_mut(r).iter_mut().zip(inv_std) {
                        *o = *o * is;
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let eps = T::lit(COSINE_EPS);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                for r in 0..av.rows() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt().max(eps);
                    let ny = y.iter().map(|&q| q * q).sum::<T>().sqrt().max(eps);
                    let cos = node.value.get(r, 0);
                    let d = dy.get(r, 0);
                    for c in 0..x.len() {
                        ga.set(r, c, d * (y[c] / (nx * ny) - cos * x[c] / (nx * nx)));
                        gb.set(r, c, d * (x[c] / (nx * ny) - cos * y[c] / (ny * ny)));
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }

    /// Collects gradients for every bound parameter. Frozen parameters and
    /// parameters the loss does not reach receive exact zeros.
    pub fn gradients(
        &self,
        grads: &[Option<Tensor<T>>],
        bound: &Bound,
        store: &ParamStore<T>,
    ) -> Gradients<T> {
        let mut out = Gradients::new();
        for (name, value) in store.iter() {
            let g = bound
                .ids
                .get(name)
                .filter(|_| bound.trainable.contains(name))
                .and_then(|id| grads[id.0].clone())
                .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
            out.insert(name, g);
        }
        out
    }
}

/// Evaluates `loss_fn` with every parameter bound on a fresh graph and returns
/// its value and exact reverse-mode gradients. Parameters named in `stop_set`
/// enter the computation as constants and receive exactly-zero gradients.
pub fn gradient<T, F>(
    loss_fn: F,
    params: &ParamStore<T>,
    stop_set: &BTreeSet<String>,
) -> Result<(T, Gradients<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, &Bound) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let bound = graph.bind(params, |n| stop_set.contains(n));
    let loss = loss_fn(&mut graph, &bound)?;
    let value = graph.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("loss".into()));
    }
    let grads = graph.backward(loss)?;
    Ok((value, graph.gradients(&grads, &bound, params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone());
        }
        s
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let theta = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        let params = store(&[("theta", theta.clone())]);
        let (value, grads) = gradient(
            |g, b| {
                let t = b.id("theta")?;
                let sq = g.mul(t, t);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &params,
            &BTreeSet::new(),
        )
        .unwrap();
        assert!((value - 0.5 * (2.25 + 4.0 + 0.0625 + 9.0)).abs() < 1e-15);
        assert_eq!(grads.get("theta").unwrap(), &theta);
    }

    #[test]
    fn stop_set_all_params_gives_zero() {
        let params = store(&[
            ("a", Tensor::from_rows(&[vec![1.0, 2.0]])),
            ("b", Tensor::from_rows(&[vec![3.0], vec![-1.0]])),
        ]);
        let stop: BTreeSet<String> = params.names().map(String::from).collect();
        let (_, grads) = gradient(
            |g, b| {
                let y = g.matmul(b.id("a")?, b.id("b")?);
                Ok(g.sum(y))
            },
            &params,
            &stop,
        )
        .unwrap();
        for (_, t) in grads.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let params = store(&[("w", Tensor::scalar(2.0))]);
        let (value, grads) = gradient(
            |g, b| {
                let w = b.id("w")?;
                let d = g.detach(w);
                Ok(g.mul(w, d))
            },
            &params,
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(value, 4.0);
        // d/dw (w * const(w)) = const(w) = 2, not 2w = 4
        assert_eq!(grads.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let params = store(&[("w", Tensor::scalar(0.0))]);
        let err = gradient(
            |g, b| {
                let l = g.log(b.id("w")?);
                Ok(g.sum(l))
            },
            &params,
            &BTreeSet::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
    }

    #[test]
    fn squash_of_zero_is_half() {
        assert_eq!(squash(0.0f64, 1e-6), 0.5);
        assert!(squash(1e6f64, 1e-6) < 1.0);
        assert!(squash(-1e6f64, 1e-6) > 0.0);
    }

    #[test]
    fn floored_cross_entropy_values() {
        let v = floored_cross_entropy(&[1.0, 0.0, 0.0], &[0.5, 0.25, 0.25]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let u = [0.25; 4];
        assert!((floored_cross_entropy(&u, &u) - 4f64.ln()).abs() < 1e-12);
    }
}
