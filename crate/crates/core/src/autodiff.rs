//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward evaluation. Parameters
//! are borrowed from the caller's parameter list rather than copied, and
//! [`Tape::backward`] accumulates exact gradients for them into a matching
//! list of gradient buffers. One tape per sample keeps per-sample work
//! independent so callers can evaluate samples in parallel and reduce the
//! gradient buffers afterwards in a fixed order.

use crate::tensor::Mat;
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Clamp { x: Var, lo: T, hi: T },
    SumSq(Var),
    Sum(Var),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Mat<T>>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Mat<T>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Mat<T>]) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("non-parameter node carries a value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.nodes.push(Node { op: Op::Const, value: Some(m), needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Parameter `index` of the borrowed parameter list; repeated calls reuse one node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(index), value: None, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(Op::MatMulBt(a, b), out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    /// Adds the `1 × cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        self.push(Op::AddRow(a, row), out, &[a, row])
    }

    /// Multiplies every row of `a` elementwise by the `1 × cols` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        self.push(Op::MulRow(a, row), out, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::Shift(a), out, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), out, &[a])
    }

    /// Row-wise normalization to zero mean and unit variance, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push(Op::LayerNorm { x: a, rstd }, out, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(Op::Softmax(a), out, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of range");
        let out = Mat::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        self.push(Op::SliceCols { x: a, start }, out, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "row slice out of range");
        let c = x.cols();
        let out = Mat::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows { x: a, start }, out, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out, parts)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp { x: a, lo, hi }, out, &[a])
    }

    /// Sum of squares, a `1 × 1` node.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum_sq());
        self.push(Op::SumSq(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, &[a])
    }

    /// Back-propagates from the `1 × 1` node `root`, scaling its gradient by
    /// `seed`, and adds parameter gradients into `grads` (same layout as the
    /// borrowed parameter list).
    pub fn backward(&self, root: Var, seed: T, grads: &mut [Mat<T>]) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar node");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer layout mismatch");
        let mut g: Vec<Option<Mat<T>>> = (0..=root.0).map(|_| None).collect();
        g[root.0] = Some(Mat::scalar(seed));
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(p) => grads[*p].add_assign(&gi),
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let d = gi.matmul_bt(self.value(*b));
                        acc(&mut g, *a, d);
                    }
                    if self.wants(*b) {
                        let d = self.value(*a).matmul_at(&gi);
                        acc(&mut g, *b, d);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.wants(*a) {
                        let d = gi.matmul(self.value(*b));
                        acc(&mut g, *a, d);
                    }
                    if self.wants(*b) {
                        let d = gi.matmul_at(self.value(*a));
                        acc(&mut g, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*b) {
                        acc(&mut g, *b, gi.clone());
                    }
                    if self.wants(*a) {
                        acc(&mut g, *a, gi);
                    }
                }
                Op::Sub(a, b) => {
                    if self.wants(*b) {
                        acc(&mut g, *b, gi.scale(-T::one()));
                    }
                    if self.wants(*a) {
                        acc(&mut g, *a, gi);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        let d = gi.zip_map(self.value(*b), |x, y| x * y);
                        acc(&mut g, *a, d);
                    }
                    if self.wants(*b) {
                        let d = gi.zip_map(self.value(*a), |x, y| x * y);
                        acc(&mut g, *b, d);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.wants(*row) {
                        acc(&mut g, *row, gi.mean_rows().scale(T::lit(gi.rows() as f64)));
                    }
                    if self.wants(*a) {
                        acc(&mut g, *a, gi);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.wants(*row) {
                        let prod = gi.zip_map(self.value(*a), |x, y| x * y);
                        acc(&mut g, *row, prod.mean_rows().scale(T::lit(gi.rows() as f64)));
                    }
                    if self.wants(*a) {
                        let d = broadcast_row(&gi, self.value(*row), |x, y| x * y);
                        acc(&mut g, *a, d);
                    }
                }
                Op::Scale(a, c) => acc(&mut g, *a, gi.scale(*c)),
                Op::Shift(a) => acc(&mut g, *a, gi),
                Op::Silu(a) => {
                    let d = gi.zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    });
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = node.value.as_ref().expect("layer norm output");
                    let cols = y.cols();
                    let n = T::lit(cols as f64);
                    let mut d = Mat::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gi.row(r));
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgy = crate::tensor::dot(gr, yr) / n;
                        for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = rstd[r] * (gv - mg - yv * mgy);
                        }
                    }
                    acc(&mut g, *x, d);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gi.row(r));
                        let s = crate::tensor::dot(gr, yr);
                        for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - s);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + gi.cols()].copy_from_slice(gi.row(r));
                    }
                    acc(&mut g, *x, d);
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut d = Mat::zeros(rows, cols);
                    d.data_mut()[start * cols..(start + gi.rows()) * cols].copy_from_slice(gi.data());
                    acc(&mut g, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let cols = gi.cols();
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.wants(p) {
                            let d = Mat::from_vec(rows, cols, gi.data()[off * cols..(off + rows) * cols].to_vec());
                            acc(&mut g, p, d);
                        }
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.wants(p) {
                            let d = Mat::from_fn(gi.rows(), w, |r, c| gi.get(r, off + c));
                            acc(&mut g, p, d);
                        }
                        off += w;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let d = gi.zip_map(self.value(*x), |gv, v| if v >= *lo && v <= *hi { gv } else { T::zero() });
                    acc(&mut g, *x, d);
                }
                Op::SumSq(a) => {
                    let s = gi.get(0, 0) + gi.get(0, 0);
                    acc(&mut g, *a, self.value(*a).scale(s));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut g, *a, Mat::filled(r, c, gi.get(0, 0)));
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn acc<T: Scalar>(g: &mut [Option<Mat<T>>], v: Var, d: Mat<T>) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn broadcast_row<T: Scalar>(a: &Mat<T>, row: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast width mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.row(0)) {
            *o = f(*o, b);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Zeroed gradient buffers matching `params`.
pub fn zero_grads<T: Scalar>(params: &[Mat<T>]) -> Vec<Mat<T>> {
    params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect()
}
