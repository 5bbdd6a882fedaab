//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Every primitive's vector-Jacobian product is itself written in terms of
//! taped primitives, so a backward pass run with `create_graph = true`
//! leaves a differentiable graph of the gradients behind it. That second
//! graph is what the critic's gradient penalty differentiates.
//!
//! A [`Var`] is an index into the tape. Nodes are appended in evaluation
//! order, so reverse index order is a valid reverse topological order.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    AddBias(usize, usize),
    ColSum(usize),
    ExpandRows(usize),
    RowSum(usize),
    ExpandCols(usize),
    MulCol(usize, usize),
    Sum(usize),
    ExpandScalar(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    RowNorm(usize),
    Concat(Rc<[usize]>),
    Slice { x: usize, start: usize },
    Pad { x: usize, start: usize },
    Gather { table: usize, ids: Rc<[usize]> },
    ScatterAdd { x: usize, ids: Rc<[usize]> },
    SoftmaxXent { logits: usize, targets: Rc<[usize]>, weights: Rc<[T]> },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_id.get(&v.0)
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_id.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Single-owner computation tape. Parameters may be borrowed for the tape's
/// lifetime `'a` to avoid copying large weight tables every step.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn require_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![0; rank] });
    }
    Ok(())
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// A tape that never records parents; every value is a constant.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let requires_grad = self.recording && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Trainable leaf owning its value.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(t), true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (x, y) = (self.val(a.0), self.val(b.0));
        if x.shape() != y.shape() {
            return Err(mismatch(name, x, y));
        }
        let out = x.zip_map(y, f);
        Ok(self.push(out, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise division; a zero denominator yields zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, safe_div, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.val(a.0).map(|x| x * c);
        self.push(out, Op::Scale(a.0, c), &[a.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.val(a.0).map(|x| x + c);
        self.push(out, Op::AddScalar(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(|x| x.tanh());
        self.push(out, Op::Tanh(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(|x| x.exp());
        self.push(out, Op::Exp(a.0), &[a.0])
    }

    /// Indicator of `a > 0`, treated as a constant (zero derivative).
    fn relu_mask(&mut self, a: usize) -> Var {
        let out = self.val(a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
        self.push(out, Op::Leaf, &[])
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (x, y) = (self.val(a.0), self.val(b.0));
        if x.rank() != 2 || y.rank() != 2 {
            return Err(mismatch("matmul", x, y));
        }
        let (xr, xc) = (x.shape()[0], x.shape()[1]);
        let (yr, yc) = (y.shape()[0], y.shape()[1]);
        let (m, k) = if ta { (xc, xr) } else { (xr, xc) };
        let (k2, n) = if tb { (yc, yr) } else { (yr, yc) };
        if k != k2 {
            return Err(mismatch("matmul", x, y));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, x.data(), ta, y.data(), tb, &mut out);
        let out = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0]))
    }

    /// Adds a bias vector `[m]` to every row of `x: [n, m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x.0), self.val(b.0));
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(mismatch("add_bias", xv, bv));
        }
        let m = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bias) in row.iter_mut().zip(bv.data()) {
                *o = *o + bias;
            }
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::AddBias(x.0, b.0), &[x.0, b.0]))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Sums a `[n, m]` matrix over rows, giving `[m]`.
    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        require_rank("col_sum", xv, 2)?;
        let m = xv.shape()[1];
        let mut out = vec![T::zero(); m];
        for row in xv.data().chunks(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(self.push(Tensor::from_raw(vec![m], out), Op::ColSum(x.0), &[x.0]))
    }

    /// Repeats a `[m]` vector as `n` rows.
    pub fn expand_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.val(v.0);
        require_rank("expand_rows", vv, 1)?;
        let m = vv.len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(vv.data());
        }
        Ok(self.push(Tensor::from_raw(vec![n, m], out), Op::ExpandRows(v.0), &[v.0]))
    }

    /// Sums a `[n, m]` matrix over columns, giving `[n]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        require_rank("row_sum", xv, 2)?;
        let (n, m) = (xv.shape()[0], xv.shape()[1]);
        let out: Vec<T> = xv.data().chunks(m).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(Tensor::from_raw(vec![n], out), Op::RowSum(x.0), &[x.0]))
    }

    /// Repeats a `[n]` vector as `m` columns.
    pub fn expand_cols(&mut self, v: Var, m: usize) -> Result<Var> {
        let vv = self.val(v.0);
        require_rank("expand_cols", vv, 1)?;
        let n = vv.len();
        let mut out = Vec::with_capacity(n * m);
        for &s in vv.data() {
            out.extend(std::iter::repeat_n(s, m));
        }
        Ok(self.push(Tensor::from_raw(vec![n, m], out), Op::ExpandCols(v.0), &[v.0]))
    }

    /// Scales row `i` of `x: [n, m]` by `s[i]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.val(x.0), self.val(s.0));
        if xv.rank() != 2 || sv.rank() != 1 || xv.shape()[0] != sv.shape()[0] {
            return Err(mismatch("mul_col", xv, sv));
        }
        let m = xv.shape()[1];
        let mut out = xv.data().to_vec();
        for (row, &f) in out.chunks_mut(m).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::MulCol(x.0, s.0), &[x.0, s.0]))
    }

    /// Euclidean norm of each row of `x: [n, m]`, giving `[n]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x.0);
        require_rank("row_norm", xv, 2)?;
        let (n, m) = (xv.shape()[0], xv.shape()[1]);
        let out: Vec<T> =
            xv.data().chunks(m).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        Ok(self.push(Tensor::from_raw(vec![n], out), Op::RowNorm(x.0), &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.0).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x.0).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let sv = self.val(s.0);
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_scalar",
                lhs: sv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::full(shape, sv.item());
        Ok(self.push(out, Op::ExpandScalar(s.0), &[s.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.val(x.0);
        let out = xv.clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    /// Concatenates `[n, m_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let n = self.val(first.0).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let pv = self.val(p.0);
            if pv.rank() != 2 || pv.shape()[0] != n {
                return Err(mismatch("concat_cols", self.val(first.0), pv));
            }
            widths.push(pv.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p.0).data()[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_raw(vec![n, total], out);
        Ok(self.push(out, Op::Concat(ids.clone().into()), &ids))
    }

    /// Columns `start..end` of `x: [n, m]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x.0);
        require_rank("slice_cols", xv, 2)?;
        let (n, m) = (xv.shape()[0], xv.shape()[1]);
        if start >= end || end > m {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in xv.data().chunks(m) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(self.push(Tensor::from_raw(vec![n, w], out), Op::Slice { x: x.0, start }, &[x.0]))
    }

    /// Embeds `x: [n, w]` into zero columns of width `total` at `start`.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let xv = self.val(x.0);
        require_rank("pad_cols", xv, 2)?;
        let (n, w) = (xv.shape()[0], xv.shape()[1]);
        if start + w > total {
            return Err(Error::ShapeMismatch {
                op: "pad_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![n, total],
            });
        }
        let mut out = vec![T::zero(); n * total];
        for (r, row) in xv.data().chunks(w).enumerate() {
            out[r * total + start..r * total + start + w].copy_from_slice(row);
        }
        Ok(self.push(Tensor::from_raw(vec![n, total], out), Op::Pad { x: x.0, start }, &[x.0]))
    }

    /// Selects rows of `table: [v, d]`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.val(table.0);
        require_rank("gather_rows", tv, 2)?;
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("gather_rows: id {bad} >= {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_raw(vec![ids.len(), d], out);
        Ok(self.push(out, Op::Gather { table: table.0, ids: ids.into() }, &[table.0]))
    }

    /// Adds row `r` of `x` into row `ids[r]` of a zero `[rows, d]` matrix.
    pub fn scatter_add_rows(&mut self, x: Var, ids: &[usize], rows: usize) -> Result<Var> {
        let xv = self.val(x.0);
        require_rank("scatter_add_rows", xv, 2)?;
        if xv.shape()[0] != ids.len() || ids.iter().any(|&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![ids.len(), rows],
            });
        }
        let d = xv.shape()[1];
        let mut out = vec![T::zero(); rows * d];
        for (r, &i) in ids.iter().enumerate() {
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(xv.row(r)) {
                *o = *o + v;
            }
        }
        let out = Tensor::from_raw(vec![rows, d], out);
        Ok(self.push(out, Op::ScatterAdd { x: x.0, ids: ids.into() }, &[x.0]))
    }

    /// Weighted sum over rows of `-log softmax(logits[r])[targets[r]]`.
    /// Rows with zero weight are skipped entirely.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        let lv = self.val(logits.0);
        require_rank("softmax_cross_entropy", lv, 2)?;
        let (n, v) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut total = T::zero();
        for r in 0..n {
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::InvalidArgument(format!(
                    "softmax_cross_entropy: target {t} >= {v} classes"
                )));
            }
            let row = lv.row(r);
            total = total + weights[r] * (log_sum_exp(row) - row[t]);
        }
        let op = Op::SoftmaxXent { logits: logits.0, targets: targets.into(), weights: weights.into() };
        Ok(self.push(Tensor::scalar(total), op, &[logits.0]))
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of `output` with respect to each of `wrt`. With
    /// `create_graph` the returned vars are themselves differentiable.
    /// Inputs that do not influence `output` get zero gradients.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let grads = self.run_backward(output, create_graph)?;
        let saved = self.recording;
        self.recording = false;
        let out = wrt
            .iter()
            .map(|w| match grads[w.0] {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.val(w.0).shape());
                    self.constant(z)
                }
            })
            .collect();
        self.recording = saved;
        Ok(out)
    }

    /// Gradients of a scalar loss for every leaf created with `param`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.run_backward(loss, false)?;
        let mut by_id = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(grads.len()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = match grads[id] {
                    Some(g) => self.nodes[g.0].value.clone().into_owned(),
                    None => Tensor::zeros(node.value.shape()),
                };
                by_id.insert(id, g);
            }
        }
        Ok(Gradients { by_id })
    }

    fn run_backward(&mut self, output: Var, create_graph: bool) -> Result<Vec<Option<Var>>> {
        let out_shape = self.val(output.0).shape();
        if !out_shape.is_empty() && out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(out_shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if !self.nodes[output.0].requires_grad {
            return Ok(grads);
        }
        let saved = self.recording;
        self.recording = create_graph;
        let seed = Tensor::full(self.val(output.0).shape(), T::one());
        grads[output.0] = Some(self.push_leaf(Cow::Owned(seed), false));
        let result = (|| {
            for i in (0..n).rev() {
                let Some(g) = grads[i] else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                let op = self.nodes[i].op.clone();
                for (parent, pg) in self.vjp(i, &op, g)? {
                    if !self.nodes[parent].requires_grad {
                        continue;
                    }
                    grads[parent] = Some(match grads[parent] {
                        None => pg,
                        Some(prev) => self.add(prev, pg)?,
                    });
                }
            }
            Ok(())
        })();
        self.recording = saved;
        result.map(|()| grads)
    }

    /// Vector-Jacobian product of node `i` for upstream gradient `g`.
    fn vjp(&mut self, i: usize, op: &Op<T>, g: Var) -> Result<Vec<(usize, Var)>> {
        let me = Var(i);
        Ok(match *op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let nb = self.neg(g);
                vec![(a, g), (b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, Var(b))?;
                let gb = self.mul(g, Var(a))?;
                vec![(a, ga), (b, gb)]
            }
            Op::Div(a, b) => {
                let ga = self.div(g, Var(b))?;
                let t = self.mul(g, me)?;
                let t = self.div(t, Var(b))?;
                let gb = self.neg(t);
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MatMul { a, b, ta, tb } => {
                let ga = if ta {
                    self.matmul_t(Var(b), g, tb, true)?
                } else {
                    self.matmul_t(g, Var(b), false, !tb)?
                };
                let gb = if tb {
                    self.matmul_t(g, Var(a), true, ta)?
                } else {
                    self.matmul_t(Var(a), g, !ta, false)?
                };
                vec![(a, ga), (b, gb)]
            }
            Op::AddBias(x, b) => {
                let gb = self.col_sum(g)?;
                vec![(x, g), (b, gb)]
            }
            Op::ColSum(x) => {
                let n = self.val(x).rows();
                vec![(x, self.expand_rows(g, n)?)]
            }
            Op::ExpandRows(v) => vec![(v, self.col_sum(g)?)],
            Op::RowSum(x) => {
                let m = self.val(x).shape()[1];
                vec![(x, self.expand_cols(g, m)?)]
            }
            Op::ExpandCols(v) => vec![(v, self.row_sum(g)?)],
            Op::MulCol(x, s) => {
                let gx = self.mul_col(g, Var(s))?;
                let t = self.mul(g, Var(x))?;
                let gs = self.row_sum(t)?;
                vec![(x, gx), (s, gs)]
            }
            Op::Sum(x) => {
                let shape = self.val(x).shape().to_vec();
                vec![(x, self.expand_scalar(g, &shape)?)]
            }
            Op::ExpandScalar(s) => {
                let total = self.sum(g);
                let shape = self.val(s).shape().to_vec();
                vec![(s, self.reshape(total, &shape)?)]
            }
            Op::Reshape(x) => {
                let shape = self.val(x).shape().to_vec();
                vec![(x, self.reshape(g, &shape)?)]
            }
            Op::Relu(x) => {
                let mask = self.relu_mask(x);
                vec![(x, self.mul(g, mask)?)]
            }
            Op::Sigmoid(x) => {
                // y (1 - y)
                let one_minus = self.neg(me);
                let one_minus = self.add_scalar(one_minus, T::one());
                let d = self.mul(me, one_minus)?;
                vec![(x, self.mul(g, d)?)]
            }
            Op::Tanh(x) => {
                let sq = self.mul(me, me)?;
                let sq = self.neg(sq);
                let d = self.add_scalar(sq, T::one());
                vec![(x, self.mul(g, d)?)]
            }
            Op::Exp(x) => vec![(x, self.mul(g, me)?)],
            Op::RowNorm(x) => {
                let f = self.div(g, me)?;
                vec![(x, self.mul_col(Var(x), f)?)]
            }
            Op::Concat(ref ids) => {
                let mut out = Vec::with_capacity(ids.len());
                let mut start = 0;
                for &p in ids.iter() {
                    let w = self.val(p).shape()[1];
                    out.push((p, self.slice_cols(g, start, start + w)?));
                    start += w;
                }
                out
            }
            Op::Slice { x, start } => {
                let w = self.val(i).shape()[1];
                let total = self.val(x).shape()[1];
                debug_assert!(start + w <= total);
                vec![(x, self.pad_cols(g, start, total)?)]
            }
            Op::Pad { x, start } => {
                let w = self.val(x).shape()[1];
                vec![(x, self.slice_cols(g, start, start + w)?)]
            }
            Op::Gather { table, ref ids } => {
                let rows = self.val(table).rows();
                vec![(table, self.scatter_add_rows(g, ids, rows)?)]
            }
            Op::ScatterAdd { x, ref ids } => vec![(x, self.gather_rows(g, ids)?)],
            Op::SoftmaxXent { logits, ref targets, ref weights } => {
                if self.recording {
                    return Err(Error::NoSecondOrder("softmax_cross_entropy"));
                }
                let scale = self.val(g.0).item();
                let lv = self.val(logits);
                let v = lv.shape()[1];
                let mut out = vec![T::zero(); lv.len()];
                for (r, row) in lv.data().chunks(v).enumerate() {
                    let w = weights[r];
                    if w == T::zero() {
                        continue;
                    }
                    let dst = &mut out[r * v..(r + 1) * v];
                    softmax_into(row, dst);
                    dst[targets[r]] = dst[targets[r]] - T::one();
                    dst.iter_mut().for_each(|d| *d = *d * w * scale);
                }
                let gl = Tensor::from_raw(lv.shape().to_vec(), out);
                vec![(logits, self.constant(gl))]
            }
        })
    }
}

#[inline]
fn safe_div<T: Real>(a: T, b: T) -> T {
    if b == T::zero() {
        T::zero()
    } else {
        a / b
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Writes `softmax(row)` into `dst`.
pub fn softmax_into<T: Real>(row: &[T], dst: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v - max).exp();
        s = s + *d;
    }
    dst.iter_mut().for_each(|d| *d = *d / s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param_owned(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_form_gradient() {
        let mut tape = Tape::new();
        let w = tape.param_owned(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(t(&[3, 1], &[4.0, 5.0, 6.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x + x) → grad 3
        let mut tape = Tape::new();
        let x = tape.param_owned(t(&[2], &[1.0, -1.0]));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constant_graph_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param_owned(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let sq = tape.mul(c, c).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param_owned(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn second_derivative_of_square() {
        for &x0 in &[-3.0, 0.0, 0.7, 5.0] {
            let mut tape = Tape::new();
            let x = tape.param_owned(t(&[1], &[x0]));
            let sq = tape.mul(x, x).unwrap();
            let f = tape.sum(sq);
            let [dx] = tape.grad(f, &[x], true).unwrap()[..] else { panic!() };
            assert_eq!(tape.value(dx).data(), &[2.0 * x0]);
            let s = tape.sum(dx);
            let [ddx] = tape.grad(s, &[x], false).unwrap()[..] else { panic!() };
            assert_eq!(tape.value(ddx).data(), &[2.0]);
        }
    }

    #[test]
    fn cross_entropy_has_no_second_order_rule() {
        let mut tape = Tape::new();
        let l = tape.param_owned(t(&[1, 3], &[0.1, 0.2, 0.3]));
        let loss = tape.softmax_cross_entropy(l, &[1], &[1.0]).unwrap();
        let err = tape.grad(loss, &[l], true).unwrap_err();
        assert!(matches!(err, Error::NoSecondOrder("softmax_cross_entropy")));
        // first order is fine
        assert!(tape.grad(loss, &[l], false).is_ok());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let w = t(&[2], &[1.0, 2.0]);
        let mut tape = Tape::inference();
        let x = tape.param(&w);
        let y = tape.mul(x, x).unwrap();
        assert!(!tape.requires_grad(y));
    }
}
