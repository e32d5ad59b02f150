//! Tape-based reverse-mode differentiation over 2-D row-major values.
//!
//! A [`Graph`] records every operation in evaluation order; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the nodes that were
//! registered with [`Graph::param`].

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, AttnShape};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Dropout { x: Var, mask: Vec<T> },
    Dot { x: Var, weights: Vec<T> },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    param: Option<usize>,
    needs_grad: bool,
}

/// Gradients of a scalar loss, indexed by parameter id.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: usize) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: usize) -> Option<Vec<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, [T]>, rows: usize, cols: usize, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf, borrowed without copying. `id` indexes the result of
    /// [`Graph::backward`].
    pub fn param(&mut self, t: &'a Tensor<T>, id: usize) -> Var {
        let (r, c) = dims(t);
        let v = self.push(Cow::Borrowed(t.data()), r, c, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let (r, c) = dims(&t);
        self.push(Cow::Owned(t.into_data()), r, c, Op::Leaf, false)
    }

    /// A constant leaf that borrows its data.
    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        let (r, c) = dims(t);
        self.push(Cow::Borrowed(t.data()), r, c, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// `(rows, cols)`.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b), ng))
    }

    /// Adds a length-`cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr * rc != c {
            return Err(Error::shape("add_row", format!("{r}x{c} + {rr}x{rc}")));
        }
        let bias = self.value(row);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, v)| *v + bias[i % c]).collect();
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow(x, row), ng))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|v| *v * s).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), r, c, Op::Scale(x, s), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} vs {rb} rows")));
        }
        let out = kernels::concat_cols(self.value(a), self.value(b), ra, ca, cb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Cow::Owned(out), ra, ca + cb, Op::ConcatCols(a, b), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let out = kernels::slice_cols(self.value(x), r, c, start, len);
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols { x, start }, ng))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather", format!("row {bad} of {r}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            c,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), r, c, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", format!("{c} columns")));
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x), r, c, self.value(gain), self.value(bias));
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Cow::Owned(y),
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = kernels::softmax_rows(self.value(x), r, c);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), r, c, Op::Softmax(x), ng)
    }

    /// Fused multi-head causal attention. `q`, `k`, `v` are
    /// `(batch·seq) × width` with heads laid out as contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, width) = self.shape(q);
        if self.shape(k) != (r, width) || self.shape(v) != (r, width) {
            return Err(Error::shape("attention", "q, k and v must share a shape"));
        }
        if r != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{r}x{width} with batch={batch} seq={seq} heads={heads}"),
            ));
        }
        let shape = AttnShape {
            batch,
            seq,
            heads,
            width,
        };
        let (out, probs) = kernels::causal_attention(self.value(q), self.value(k), self.value(v), shape);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Cow::Owned(out), r, width, Op::Attention { q, k, v, shape, probs }, ng))
    }

    /// Attention probabilities recorded by a [`Graph::causal_attention`] node,
    /// laid out `batch × heads × seq × seq`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], AttnShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, shape, .. } => Some((probs, *shape)),
            _ => None,
        }
    }

    /// Mean cross-entropy over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || mask.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        if let Some(t) = targets.iter().zip(mask).find(|(t, m)| **m && **t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {} of {c}", t.0)));
        }
        let (loss, probs, count) = kernels::cross_entropy(self.value(logits), targets, mask, c);
        if count == 0 {
            return Err(Error::Empty("cross_entropy: no position selected by the loss mask"));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.value(x).iter().zip(&mask).map(|(a, b)| *a * *b).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(Cow::Owned(out), r, c, Op::Dropout { x, mask }, ng)
    }

    /// `Σ x ⊙ weights` as a 1×1 value.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("dot", format!("{} vs {}", weights.len(), self.value(x).len())));
        }
        let s: T = self.value(x).iter().zip(&weights).map(|(a, b)| *a * *b).sum();
        let ng = self.ng(x);
        Ok(self.push(Cow::Owned(vec![s]), 1, 1, Op::Dot { x, weights }, ng))
    }

    /// Back-propagates from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss is {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.param.is_some() {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let n_params = self.nodes.iter().filter_map(|n| n.param).map(|id| id + 1).max().unwrap_or(0);
        let mut out = Gradients {
            grads: (0..n_params).map(|_| None).collect(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads[i].take()) {
                match &mut out.grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                let mut da = want(*a).then(|| take_or_zero(grads, *a, m * k));
                let mut db = want(*b).then(|| take_or_zero(grads, *b, k * n));
                kernels::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    m,
                    k,
                    n,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(da) = da {
                    store(grads, *a, da);
                }
                if let Some(db) = db {
                    store(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(grads, v, g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    accumulate(grads, *x, g);
                }
                if want(*row) {
                    let c = node.cols;
                    let mut acc = take_or_zero(grads, *row, c);
                    for chunk in g.chunks(c) {
                        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += *b);
                    }
                    store(grads, *row, acc);
                }
            }
            Op::Scale(x, s) => {
                if want(*x) {
                    let scaled: Vec<T> = g.iter().map(|v| *v * *s).collect();
                    accumulate(grads, *x, &scaled);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a).1, self.shape(*b).1);
                if want(*a) {
                    accumulate(grads, *a, &kernels::slice_cols(g, node.rows, ca + cb, 0, ca));
                }
                if want(*b) {
                    accumulate(grads, *b, &kernels::slice_cols(g, node.rows, ca + cb, ca, cb));
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let (r, c) = self.shape(*x);
                    let mut acc = take_or_zero(grads, *x, r * c);
                    for row in 0..r {
                        for j in 0..node.cols {
                            acc[row * c + start + j] += g[row * node.cols + j];
                        }
                    }
                    store(grads, *x, acc);
                }
            }
            Op::Gather { table, ids } => {
                if want(*table) {
                    let (r, c) = self.shape(*table);
                    let mut acc = take_or_zero(grads, *table, r * c);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut acc[id * c..(id + 1) * c];
                        dst.iter_mut().zip(&g[row * c..(row + 1) * c]).for_each(|(a, b)| *a += *b);
                    }
                    store(grads, *table, acc);
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let d: Vec<T> = self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| kernels::gelu_derivative(*v) * *gv)
                        .collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (node.rows, node.cols);
                let mut dx = want(*x).then(|| take_or_zero(grads, *x, r * c));
                let mut dg = want(*gain).then(|| take_or_zero(grads, *gain, c));
                let mut db = want(*bias).then(|| take_or_zero(grads, *bias, c));
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    self.value(*gain),
                    r,
                    c,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(d) = d {
                        store(grads, v, d);
                    }
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let (r, c) = (node.rows, node.cols);
                    let mut acc = take_or_zero(grads, *x, r * c);
                    kernels::softmax_backward(&node.value, g, &mut acc, r, c);
                    store(grads, *x, acc);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let n = node.rows * node.cols;
                let mut dq = take_or_zero(grads, *q, n);
                let mut dk = take_or_zero(grads, *k, n);
                let mut dv = take_or_zero(grads, *v, n);
                kernels::causal_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *shape,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if want(var) {
                        store(grads, var, d);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if want(*logits) {
                    let (r, c) = self.shape(*logits);
                    let s = g[0] / T::of(*count as f64);
                    let mut acc = take_or_zero(grads, *logits, r * c);
                    for row in 0..r {
                        if !mask[row] {
                            continue;
                        }
                        for col in 0..c {
                            acc[row * c + col] += probs[row * c + col] * s;
                        }
                        acc[row * c + targets[row]] -= s;
                    }
                    store(grads, *logits, acc);
                }
            }
            Op::Dropout { x, mask } => {
                if want(*x) {
                    let d: Vec<T> = g.iter().zip(mask).map(|(a, b)| *a * *b).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Dot { x, weights } => {
                if want(*x) {
                    let d: Vec<T> = weights.iter().map(|w| *w * g[0]).collect();
                    accumulate(grads, *x, &d);
                }
            }
        }
    }
}

fn take_or_zero<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
}

/// Puts a gradient back, adding to anything stored meanwhile (an operand
/// used twice by the same op).
fn store<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot => *slot = Some(g),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        slot => *slot = Some(g.to_vec()),
    }
}
