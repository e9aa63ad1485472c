// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wengert tape: every operation appends a node holding its forward value and
//! enough bookkeeping to replay the chain rule in reverse.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied inside `log` and row normalisation.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    /// `[m, n] + [1, n]`, the row broadcast over every row.
    AddRow,
    Scale(f64),
    AddScalar(f64),
    /// `[1, 1] * [m, n]`.
    ScaleBy,
    RowSoftmax { causal: bool },
    LogSoftmax,
    RowL2Normalize,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Clamp { lo: f64, hi: f64 },
    Reshape(Vec<usize>),
    SelectRows(Vec<usize>),
    SelectCols(Vec<usize>),
    ConcatRows,
    ConcatCols,
    /// `inputs[0]` with the listed rows taken from `inputs[1]`; a single-row
    /// source is broadcast to every listed row.
    ReplaceRows(Vec<usize>),
    Sum,
    Mean,
    SumRows,
    StopGradient,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    ScaleBy(Var, Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    RowL2Normalize(Var, Vec<S>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, S, S),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ReplaceRows(Var, Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-threaded recording of a computation. One tape per forward pass;
/// use independent tapes for parallel workers.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Vec<S>>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

fn matmul_into<S: Scalar>(
    a: ArrayView2<'_, S>,
    b: ArrayView2<'_, S>,
    out: &mut [S],
    beta: S,
) {
    let (m, n) = (a.nrows(), b.ncols());
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("output buffer sized by caller");
    general_mat_mul(S::one(), &a, &b, beta, &mut c);
}

fn view<S>(data: &[S], r: usize, c: usize) -> ArrayView2<'_, S> {
    ArrayView2::from_shape((r, c), data).expect("shape checked when recorded")
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        value.zero_grad();
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::shape(op, format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Generic entry point over [`OpKind`]; the typed methods below are
    /// thin wrappers around the same recording logic.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape("apply", format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::AddRow => {
                arity(2)?;
                self.add_row(inputs[0], inputs[1])
            }
            OpKind::Scale(s) => {
                arity(1)?;
                self.scale(inputs[0], S::of(*s))
            }
            OpKind::AddScalar(s) => {
                arity(1)?;
                self.add_scalar(inputs[0], S::of(*s))
            }
            OpKind::ScaleBy => {
                arity(2)?;
                self.scale_by(inputs[0], inputs[1])
            }
            OpKind::RowSoftmax { causal } => {
                arity(1)?;
                self.row_softmax(inputs[0], *causal)
            }
            OpKind::LogSoftmax => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
            OpKind::RowL2Normalize => {
                arity(1)?;
                self.row_l2_normalize(inputs[0])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Clamp { lo, hi } => {
                arity(1)?;
                self.clamp(inputs[0], S::of(*lo), S::of(*hi))
            }
            OpKind::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape.clone())
            }
            OpKind::SelectRows(idx) => {
                arity(1)?;
                self.select_rows(inputs[0], idx)
            }
            OpKind::SelectCols(idx) => {
                arity(1)?;
                self.select_cols(inputs[0], idx)
            }
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::ReplaceRows(rows) => {
                arity(2)?;
                self.replace_rows(inputs[0], inputs[1], rows)
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::SumRows => {
                arity(1)?;
                self.sum_rows(inputs[0])
            }
            OpKind::StopGradient => {
                arity(1)?;
                self.stop_gradient(inputs[0])
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (m, k) = dims(self.value(a), "matmul")?;
        let (k2, n) = dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(view(self.value(a).data(), m, k), view(self.value(b).data(), k, n), &mut out, S::zero());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a, "transpose")?;
        let (m, n) = dims(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a, op)?;
        self.check(b, op)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_all(&mut self, vs: &[Var]) -> Result<Var> {
        let (&first, rest) = vs
            .split_first()
            .ok_or_else(|| Error::shape("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a, "add_row")?;
        self.check(row, "add_row")?;
        let (m, n) = dims(self.value(a), "add_row")?;
        let (r, c) = dims(self.value(row), "add_row")?;
        if r != 1 || c != n {
            return Err(Error::shape("add_row", format!("[{m}, {n}] + [{r}, {c}]")));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(&rv).for_each(|(x, &y)| *x = *x + y);
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, op: Op<S>, name: &'static str, f: impl Fn(S) -> S) -> Result<Var> {
        self.check(a, name)?;
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), "add_scalar", |x| x + s)
    }

    /// `s * a` where `s` is a one-element value on the tape.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        self.check(s, "scale_by")?;
        let sv = self
            .value(s)
            .item()
            .map_err(|_| Error::shape("scale_by", "scale factor must hold one value"))?;
        self.check(a, "scale_by")?;
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[s, a]);
        Ok(self.push(value, Op::ScaleBy(s, a), rg))
    }

    /// Row-wise softmax with max subtraction. With `causal`, entry `(i, j)` for
    /// `j > i` is excluded and receives probability zero.
    pub fn row_softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        self.check(a, "row_softmax")?;
        let (m, n) = dims(self.value(a), "row_softmax")?;
        if causal && m > n {
            return Err(Error::shape("row_softmax", format!("causal mask needs rows <= cols, got [{m}, {n}]")));
        }
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let width = if causal { n - m + i + 1 } else { n };
            let row = &src[i * n..i * n + width];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let dst = &mut out[i * n..i * n + width];
            let mut z = S::zero();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                z = z + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / z);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::RowSoftmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a, "log_softmax")?;
        let (m, n) = dims(self.value(a), "log_softmax")?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<S>().ln();
            out[i * n..(i + 1) * n].iter_mut().zip(row).for_each(|(d, &x)| *d = x - lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmax(a), rg))
    }

    /// Divides each row by its L2 norm (floored to avoid division by zero).
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a, "row_l2_normalize")?;
        let (m, n) = dims(self.value(a), "row_l2_normalize")?;
        let src = self.value(a).data();
        let floor = S::of(LOG_FLOOR);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt().max(floor);
            norms.push(norm);
            out[i * n..(i + 1) * n].iter_mut().zip(row).for_each(|(d, &x)| *d = x / norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::RowL2Normalize(a, norms), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(S::zero()))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", |x| x.exp())
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let floor = S::of(LOG_FLOOR);
        self.unary(a, Op::Log(a), "log", |x| x.max(floor).ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", |x| x.tanh())
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        if lo > hi {
            return Err(Error::shape("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        self.unary(a, Op::Clamp(a, lo, hi), "clamp", |x| x.max(lo).min(hi))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a, "reshape")?;
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a, "select_rows")?;
        let (m, n) = dims(self.value(a), "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("select_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(src.row_slice(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::SelectRows(a, idx.to_vec()), rg))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a, "select_cols")?;
        let (m, n) = dims(self.value(a), "select_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::shape("select_cols", format!("column {bad} of {n}")));
        }
        let src = self.value(a).data();
        let k = idx.len();
        let mut out = vec![S::zero(); m * k];
        for i in 0..m {
            for (c, &j) in idx.iter().enumerate() {
                out[i * k + c] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, k], out)?, Op::SelectCols(a, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let mut n = None;
        let mut rows = 0;
        for &v in vs {
            self.check(v, "concat_rows")?;
            let (r, c) = dims(self.value(v), "concat_rows")?;
            if *n.get_or_insert(c) != c {
                return Err(Error::shape("concat_rows", format!("column counts {} and {c}", n.unwrap_or(0))));
            }
            rows += r;
        }
        let n = n.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * n);
        for &v in vs {
            out.extend_from_slice(self.value(v).data());
        }
        let rg = self.rg(vs);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(vs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut m = None;
        let mut widths = Vec::with_capacity(vs.len());
        for &v in vs {
            self.check(v, "concat_cols")?;
            let (r, c) = dims(self.value(v), "concat_cols")?;
            if *m.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", format!("row counts {} and {r}", m.unwrap_or(0))));
            }
            widths.push(c);
        }
        let m = m.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &v in vs {
                out.extend_from_slice(self.value(v).row_slice(i));
            }
        }
        let rg = self.rg(vs);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(vs.to_vec()), rg))
    }

    /// Copy of `base` whose `rows` come from `src`. `src` either matches
    /// `base` in shape or is a single row broadcast to every listed row.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        self.check(base, "replace_rows")?;
        self.check(src, "replace_rows")?;
        let (m, n) = dims(self.value(base), "replace_rows")?;
        let (sm, sn) = dims(self.value(src), "replace_rows")?;
        if sn != n || (sm != 1 && sm != m) {
            return Err(Error::shape("replace_rows", format!("base [{m}, {n}] source [{sm}, {sn}]")));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("replace_rows", format!("row {bad} of {m}")));
        }
        let mut value = self.value(base).clone();
        let sv = self.value(src);
        for &r in rows {
            let from = if sm == 1 { 0 } else { r };
            value.row_slice_mut(r).copy_from_slice(sv.row_slice(from));
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(value, Op::ReplaceRows(base, src, rows.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum")?;
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a, "mean")?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().copied().sum::<S>() / S::of(v.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum_rows")?;
        let (m, n) = dims(self.value(a), "sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            out.iter_mut().zip(&src[i * n..(i + 1) * n]).for_each(|(o, &x)| *o = *o + x);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::SumRows(a), rg))
    }

    /// Same value; backward treats the result as a constant.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.check(a, "stop_gradient")?;
        let value = self.value(a).clone();
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Reverse pass from a one-element output. Fails if called twice
    /// without [`Tape::reset_grads`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("the tape is empty".into()));
        }
        if self.grads.is_some() {
            return Err(Error::Backward("gradients already computed; call reset_grads first".into()));
        }
        self.check(output, "backward")?;
        if self.value(output).len() != 1 {
            return Err(Error::Backward(format!(
                "output must be a scalar, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![S::one()]);
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward output with respect to `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradient as a tensor shaped like `v`, zero if nothing flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds the gradient of `v` into `param.grad` (zeros if none flowed).
    pub fn accumulate_grad(&self, v: Var, param: &mut Tensor<S>) -> Result<()> {
        if self.grads.is_none() {
            return Err(Error::Backward("no backward pass has run".into()));
        }
        match self.grad(v) {
            Some(g) => param.accumulate_grad(g),
            None => param.accumulate_grad(&vec![S::zero(); param.len()]),
        }
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<S>>], v: Var, d: Vec<S>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e = *e + x),
            slot @ None => *slot = Some(d),
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).cols();
                let gv = view(g, m, n);
                if needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    matmul_into(gv, view(self.value(*b).data(), k, n).t(), &mut da, S::zero());
                    acc(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    matmul_into(view(self.value(*a).data(), m, k).t(), gv, &mut db, S::zero());
                    acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("matrix");
                let mut d = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                acc(grads, *a, d);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    acc(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    acc(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    acc(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if needs(*row) {
                    let n = self.value(*row).len();
                    let mut d = vec![S::zero(); n];
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(o, &x)| *o = *o + x);
                    }
                    acc(grads, *row, d);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) => acc(grads, *a, g.to_vec()),
            Op::ScaleBy(s, a) => {
                let sv = self.value(*s).data()[0];
                if needs(*a) {
                    acc(grads, *a, g.iter().map(|&x| x * sv).collect());
                }
                if needs(*s) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).sum::<S>();
                    acc(grads, *s, vec![d]);
                }
            }
            Op::RowSoftmax(a) => {
                let n = node.value.cols();
                let mut d = vec![S::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<S>();
                    dr.iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (&u, &v))| *o = v * (u - dot));
                }
                acc(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut d = vec![S::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total = gr.iter().copied().sum::<S>();
                    dr.iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (&u, &v))| *o = u - v.exp() * total);
                }
                acc(grads, *a, d);
            }
            Op::RowL2Normalize(a, norms) => {
                let n = node.value.cols();
                let mut d = vec![S::zero(); g.len()];
                for (((dr, gr), yr), &norm) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(norms) {
                    let dot = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<S>();
                    dr.iter_mut().zip(gr.iter().zip(yr)).for_each(|(o, (&u, &v))| *o = (u - v * dot) / norm);
                }
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, g.iter().zip(x).map(|(&u, &v)| if v > S::zero() { u } else { S::zero() }).collect());
            }
            Op::Exp(a) => acc(grads, *a, g.iter().zip(y).map(|(&u, &v)| u * v).collect()),
            Op::Log(a) => {
                let floor = S::of(LOG_FLOOR);
                let x = self.value(*a).data();
                acc(grads, *a, g.iter().zip(x).map(|(&u, &v)| if v > floor { u / v } else { S::zero() }).collect());
            }
            Op::Sigmoid(a) => acc(grads, *a, g.iter().zip(y).map(|(&u, &v)| u * v * (S::one() - v)).collect()),
            Op::Tanh(a) => acc(grads, *a, g.iter().zip(y).map(|(&u, &v)| u * (S::one() - v * v)).collect()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&u, &v)| if v > *lo && v < *hi { u } else { S::zero() })
                        .collect(),
                );
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::SelectRows(a, idx) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut d = vec![S::zero(); src.len()];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, &x)| *o = *o + x);
                }
                acc(grads, *a, d);
            }
            Op::SelectCols(a, idx) => {
                let src = self.value(*a);
                let (m, n) = src.dims2().expect("matrix");
                let k = idx.len();
                let mut d = vec![S::zero(); m * n];
                for i in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        d[i * n + j] = d[i * n + j] + g[i * k + c];
                    }
                }
                acc(grads, *a, d);
            }
            Op::ConcatRows(vs) => {
                let mut offset = 0;
                for &v in vs {
                    let len = self.value(v).len();
                    if needs(v) {
                        acc(grads, v, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(vs) => {
                let total = node.value.cols();
                let mut col = 0;
                for &v in vs {
                    let (m, c) = self.value(v).dims2().expect("matrix");
                    if needs(v) {
                        let mut d = Vec::with_capacity(m * c);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + col..i * total + col + c]);
                        }
                        acc(grads, v, d);
                    }
                    col += c;
                }
            }
            Op::ReplaceRows(base, src, rows) => {
                let n = node.value.cols();
                if needs(*base) {
                    let mut d = g.to_vec();
                    for &r in rows {
                        d[r * n..(r + 1) * n].iter_mut().for_each(|x| *x = S::zero());
                    }
                    acc(grads, *base, d);
                }
                if needs(*src) {
                    let sv = self.value(*src);
                    let mut d = vec![S::zero(); sv.len()];
                    let broadcast = sv.rows() == 1;
                    for &r in rows {
                        let to = if broadcast { 0 } else { r };
                        d[to * n..(to + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, &x)| *o = *o + x);
                    }
                    acc(grads, *src, d);
                }
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0] / S::of(n as f64); n]);
            }
            Op::SumRows(a) => {
                let (m, _) = self.value(*a).dims2().expect("matrix");
                let mut d = Vec::with_capacity(m * g.len());
                for _ in 0..m {
                    d.extend_from_slice(g);
                }
                acc(grads, *a, d);
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
