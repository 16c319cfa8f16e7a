//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Define-by-run: every operation appends a node to a [`Tape`], and the tape
//! is rebuilt for each training step. Backward replays the record in reverse
//! topological order (node order), accumulating gradients with `+=` so that
//! values consumed by several operations receive every contribution. Running
//! `backward` twice without [`Tape::zero_grads`] therefore accumulates
//! gradients additively.
//!
//! Handles ([`ValueId`]) are plain indices and are only meaningful for the
//! tape that produced them. Tapes are single-threaded; they can be moved
//! across threads but never shared mutably.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind<T> {
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Negate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    SumAll,
    MeanAll,
    MeanRows,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(ValueId, ValueId),
    Unary(UnaryKind<T>, ValueId),
    Binary(BinaryKind, ValueId, ValueId),
    SoftmaxRows(ValueId),
    ConcatCols(Vec<ValueId>),
    ConcatRows(Vec<ValueId>),
    Reduce(ReduceKind, ValueId),
    Scale(ValueId, T),
    Transpose(ValueId),
    Slice { x: ValueId, r0: usize, c0: usize },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<ValueId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::SoftmaxRows(x)
            | Op::Reduce(_, x)
            | Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Slice { x, .. } => vec![*x],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

/// One node of the computation record: forward data, accumulated gradient and
/// the operation that produced it.
pub struct Value<T> {
    pub data: Matrix<T>,
    pub grad: Matrix<T>,
    pub requires_grad: bool,
    pub id: ValueId,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Value<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Matrix<T>, requires_grad: bool, op: Op<T>) -> ValueId {
        let id = ValueId(self.nodes.len());
        let grad = Matrix::zeros(data.rows(), data.cols());
        self.nodes.push(Value { data, grad, requires_grad, id, op });
        id
    }

    fn needs_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&mut self, data: Matrix<T>) -> ValueId {
        self.push(data, true, Op::Leaf)
    }

    /// Leaf excluded from differentiation; its gradient stays zero.
    pub fn constant(&mut self, data: Matrix<T>) -> ValueId {
        self.push(data, false, Op::Leaf)
    }

    /// Gradient-isolated copy of an existing node.
    pub fn detach(&mut self, x: ValueId) -> ValueId {
        let data = self.nodes[x.0].data.clone();
        self.constant(data)
    }

    pub fn value(&self, id: ValueId) -> &Value<T> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: ValueId) -> &Matrix<T> {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: ValueId) -> &Matrix<T> {
        &self.nodes[id.0].grad
    }

    /// Forward scalar of a 1x1 node, widened to `f64`.
    pub fn scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.data(id).shape(), (1, 1));
        self.data(id)[(0, 0)].as_f64()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            for g in node.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (am, bm) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if am.cols() != bm.rows() {
            return Err(Error::DimensionMismatch(format!(
                "matmul: {}x{} * {}x{}",
                am.rows(),
                am.cols(),
                bm.rows(),
                bm.cols()
            )));
        }
        let data = am.matmul(bm);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, rg, Op::Matmul(a, b)))
    }

    pub fn apply_unary(&mut self, kind: UnaryKind<T>, x: ValueId) -> Result<ValueId> {
        let xm = &self.nodes[x.0].data;
        if matches!(kind, UnaryKind::Log) && xm.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("log requires strictly positive entries".into()));
        }
        let data = match kind {
            UnaryKind::Relu => xm.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryKind::LeakyRelu(alpha) => xm.map(|v| if v > T::zero() { v } else { alpha * v }),
            UnaryKind::Sigmoid => xm.map(|v| T::one() / (T::one() + (-v).exp())),
            UnaryKind::Tanh => xm.map(|v| v.tanh()),
            UnaryKind::Log => xm.map(|v| v.ln()),
            UnaryKind::Exp => xm.map(|v| v.exp()),
            UnaryKind::Negate => xm.map(|v| -v),
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, rg, Op::Unary(kind, x)))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.apply_unary(UnaryKind::Relu, x).expect("relu is total")
    }

    pub fn leaky_relu(&mut self, x: ValueId, alpha: T) -> ValueId {
        self.apply_unary(UnaryKind::LeakyRelu(alpha), x).expect("leaky_relu is total")
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.apply_unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        self.apply_unary(UnaryKind::Tanh, x).expect("tanh is total")
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply_unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        self.apply_unary(UnaryKind::Exp, x).expect("exp is total")
    }

    pub fn negate(&mut self, x: ValueId) -> ValueId {
        self.apply_unary(UnaryKind::Negate, x).expect("negate is total")
    }

    pub fn apply_binary(&mut self, kind: BinaryKind, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (am, bm) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if am.shape() != bm.shape() {
            return Err(Error::DimensionMismatch(format!(
                "elementwise {:?}: {:?} vs {:?}",
                kind,
                am.shape(),
                bm.shape()
            )));
        }
        let data = match kind {
            BinaryKind::Add => am.add(bm),
            BinaryKind::Sub => am.sub(bm),
            BinaryKind::Hadamard => am.hadamard(bm),
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, rg, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply_binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply_binary(BinaryKind::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply_binary(BinaryKind::Hadamard, a, b)
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let xm = &self.nodes[x.0].data;
        if !xm.all_finite() {
            return Err(Error::NonFiniteInput("softmax_rows".into()));
        }
        let mut data = Matrix::zeros(xm.rows(), xm.cols());
        for i in 0..xm.rows() {
            let row = xm.row(i);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let out = data.row_mut(i);
            let mut sum = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, rg, Op::SoftmaxRows(x)))
    }

    /// Column-wise concatenation in argument order.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].data.rows();
        let mut cols = 0;
        for p in parts {
            let m = &self.nodes[p.0].data;
            if m.rows() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "concat_cols: expected {} rows, found {}",
                    rows,
                    m.rows()
                )));
            }
            cols += m.cols();
        }
        let mut data = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = &self.nodes[p.0].data;
            for i in 0..rows {
                data.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(data, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise (vertical) concatenation in argument order.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of zero parts".into()));
        }
        let cols = self.nodes[parts[0].0].data.cols();
        let mut rows = 0;
        for p in parts {
            let m = &self.nodes[p.0].data;
            if m.cols() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "concat_rows: expected {} cols, found {}",
                    cols,
                    m.cols()
                )));
            }
            rows += m.rows();
        }
        let mut data = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = &self.nodes[p.0].data;
            for i in 0..m.rows() {
                data.row_mut(off + i).copy_from_slice(m.row(i));
            }
            off += m.rows();
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(data, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: ValueId) -> Result<ValueId> {
        let xm = &self.nodes[x.0].data;
        if xm.is_empty() {
            return Err(Error::EmptyInput(format!("reduce {:?} of empty matrix", kind)));
        }
        let data = match kind {
            ReduceKind::SumAll => Matrix::from_vec(1, 1, vec![xm.sum()]),
            ReduceKind::MeanAll => {
                Matrix::from_vec(1, 1, vec![xm.sum() / T::c(xm.len() as f64)])
            }
            ReduceKind::MeanRows => {
                let mut out = Matrix::zeros(1, xm.cols());
                for i in 0..xm.rows() {
                    for (o, &v) in out.row_mut(0).iter_mut().zip(xm.row(i)) {
                        *o += v;
                    }
                }
                let inv = T::one() / T::c(xm.rows() as f64);
                out.map(|v| v * inv)
            }
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, rg, Op::Reduce(kind, x)))
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.reduce(ReduceKind::SumAll, x)
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.reduce(ReduceKind::MeanAll, x)
    }

    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId> {
        self.reduce(ReduceKind::MeanRows, x)
    }

    pub fn scale(&mut self, x: ValueId, c: T) -> ValueId {
        let data = self.nodes[x.0].data.scale(c);
        let rg = self.needs_grad(&[x]);
        self.push(data, rg, Op::Scale(x, c))
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let data = self.nodes[x.0].data.transpose();
        let rg = self.needs_grad(&[x]);
        self.push(data, rg, Op::Transpose(x))
    }

    /// Copies the block `rows x cols` out of `x`; backward scatters the
    /// gradient into that block.
    pub fn slice(
        &mut self,
        x: ValueId,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<ValueId> {
        let xm = &self.nodes[x.0].data;
        if rows.end > xm.rows() || cols.end > xm.cols() || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::IndexOutOfRange(format!(
                "slice {:?}x{:?} of {}x{}",
                rows,
                cols,
                xm.rows(),
                xm.cols()
            )));
        }
        let data = xm.block(rows.start, rows.end, cols.start, cols.end);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, rg, Op::Slice { x, r0: rows.start, c0: cols.start }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss.
    ///
    /// Each call propagates a fresh unit seed and adds the resulting
    /// per-pass gradients into the persistent `grad` fields, so replaying
    /// backward twice without [`Tape::zero_grads`] accumulates gradients
    /// additively (every reachable gradient doubles).
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let shape = self.nodes[loss.0].data.shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar { rows: shape.0, cols: shape.1 });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        // Nodes that both reach the loss and require gradients.
        let n = loss.0 + 1;
        let mut live = vec![false; n];
        let mut stack = vec![loss.0];
        live[loss.0] = true;
        while let Some(i) = stack.pop() {
            for p in self.nodes[i].op.parents() {
                if self.nodes[p.0].requires_grad && !live[p.0] {
                    live[p.0] = true;
                    stack.push(p.0);
                }
            }
        }

        // Per-pass upstream gradients, kept apart from the accumulated ones.
        let mut scratch: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        scratch[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            for (p, contribution) in self.contributions(i, &g) {
                let slot = &mut scratch[p.0];
                match slot {
                    Some(acc) => {
                        for (a, &c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    None => *slot = Some(contribution),
                }
            }
            let grad = &mut self.nodes[i].grad;
            for (a, &c) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += c;
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its grad-requiring parents,
    /// given this pass's upstream gradient `g`.
    fn contributions(&self, i: usize, g: &Matrix<T>) -> Vec<(ValueId, Matrix<T>)> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<(ValueId, Matrix<T>)>, p: ValueId, m: Matrix<T>| {
            if self.nodes[p.0].requires_grad {
                debug_assert_eq!(self.nodes[p.0].data.shape(), m.shape());
                out.push((p, m));
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let db = self.nodes[b.0].data.transpose();
                    push(&mut out, a, g.matmul(&db));
                }
                if self.nodes[b.0].requires_grad {
                    let da = self.nodes[a.0].data.transpose();
                    push(&mut out, b, da.matmul(g));
                }
            }
            Op::Unary(kind, x) => {
                let x = *x;
                let y = &self.nodes[i].data;
                let xm = &self.nodes[x.0].data;
                let dx = match *kind {
                    UnaryKind::Relu => {
                        g.zip_map(xm, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    }
                    UnaryKind::LeakyRelu(alpha) => {
                        g.zip_map(xm, |gv, xv| if xv > T::zero() { gv } else { gv * alpha })
                    }
                    UnaryKind::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)),
                    UnaryKind::Tanh => g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)),
                    UnaryKind::Log => g.zip_map(xm, |gv, xv| gv / xv),
                    UnaryKind::Exp => g.zip_map(y, |gv, yv| gv * yv),
                    UnaryKind::Negate => g.map(|gv| -gv),
                };
                push(&mut out, x, dx);
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    BinaryKind::Add => {
                        push(&mut out, a, g.clone());
                        push(&mut out, b, g.clone());
                    }
                    BinaryKind::Sub => {
                        push(&mut out, a, g.clone());
                        push(&mut out, b, g.map(|v| -v));
                    }
                    BinaryKind::Hadamard => {
                        push(&mut out, a, g.hadamard(&self.nodes[b.0].data));
                        push(&mut out, b, g.hadamard(&self.nodes[a.0].data));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let y = &self.nodes[i].data;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    for (o, (&gv, &yv)) in dx.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = yv * (gv - dot);
                    }
                }
                push(&mut out, x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts.clone() {
                    let (rows, cols) = self.nodes[p.0].data.shape();
                    push(&mut out, p, g.block(0, rows, off, off + cols));
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts.clone() {
                    let (rows, cols) = self.nodes[p.0].data.shape();
                    push(&mut out, p, g.block(off, off + rows, 0, cols));
                    off += rows;
                }
            }
            Op::Reduce(kind, x) => {
                let x = *x;
                let (rows, cols) = self.nodes[x.0].data.shape();
                let dx = match kind {
                    ReduceKind::SumAll => Matrix::filled(rows, cols, g[(0, 0)]),
                    ReduceKind::MeanAll => {
                        Matrix::filled(rows, cols, g[(0, 0)] / T::c((rows * cols) as f64))
                    }
                    ReduceKind::MeanRows => {
                        let inv = T::one() / T::c(rows as f64);
                        let mut dx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for (o, &gv) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                                *o = gv * inv;
                            }
                        }
                        dx
                    }
                };
                push(&mut out, x, dx);
            }
            Op::Scale(x, c) => {
                push(&mut out, *x, g.scale(*c));
            }
            Op::Transpose(x) => {
                push(&mut out, *x, g.transpose());
            }
            Op::Slice { x, r0, c0 } => {
                let x = *x;
                let (rows, cols) = self.nodes[x.0].data.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        dx[(r0 + r, c0 + c)] = g[(r, c)];
                    }
                }
                push(&mut out, x, dx);
            }
        }
        out
    }
}

/// `x * w + b`, with the bias row broadcast over the rows of `x` through a
/// ones-column matmul so that only core primitives are involved.
pub fn affine<T: Scalar>(tape: &mut Tape<T>, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let xw = tape.matmul(x, w)?;
    let rows = tape.data(xw).rows();
    let ones = tape.constant(Matrix::filled(rows, 1, T::one()));
    let bias = tape.matmul(ones, b)?;
    tape.add(xw, bias)
}

/// Expands a 1x1 scalar node into a `rows x cols` matrix of that scalar.
pub fn broadcast_scalar<T: Scalar>(
    tape: &mut Tape<T>,
    s: ValueId,
    rows: usize,
    cols: usize,
) -> Result<ValueId> {
    let col = tape.constant(Matrix::filled(rows, 1, T::one()));
    let row = tape.constant(Matrix::filled(1, cols, T::one()));
    let left = tape.matmul(col, s)?;
    tape.matmul(left, row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::rng::Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_identity_case() {
        let mut t = Tape::new();
        let i2 = t.constant(Matrix::identity(2));
        let x = t.constant(m(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.data(y), &m(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
    }

    #[test]
    fn matmul_hand_value() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![1.0, 2.0]]));
        let b = t.constant(m(&[vec![3.0], vec![4.0]]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.data(y)[(0, 0)], 11.0);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let a0: Matrix<f64> = rng.normal_matrix(3, 3, 0.0, 1.0);
        let b0: Matrix<f64> = rng.normal_matrix(3, 3, 0.0, 1.0);
        let report = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                tape.sum_all(y)
            },
            &[("a", a0), ("b", b0)],
            GradCheckOptions { eps: 1e-6, tol: 1e-6 },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn leaky_relu_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![-1.0, 0.0, 2.0]]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.data(y).data(), &[-0.01, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![0.0]]));
        let y = t.sigmoid(x);
        assert_eq!(t.data(y)[(0, 0)], 0.5);
    }

    #[test]
    fn relu_identity_on_nonnegative() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![0.0, 1.5, 3.0]]));
        let y = t.relu(x);
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, 0.0]]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn hadamard_zero_annihilates() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![2.0, 3.0]]));
        let b = t.constant(m(&[vec![0.0, 0.0]]));
        let y = t.hadamard(a, b).unwrap();
        assert_eq!(t.data(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn add_negate_cancels() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, -2.0], vec![3.0, 4.0]]));
        let nx = t.negate(x);
        let y = t.add(x, nx).unwrap();
        assert!(t.data(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_grad_wrt_b_equals_a() {
        let mut rng = Rng::new(5);
        let a0: Matrix<f64> = rng.normal_matrix(2, 4, 0.0, 1.0);
        let b0: Matrix<f64> = rng.normal_matrix(2, 4, 0.0, 1.0);
        let mut t = Tape::new();
        let a = t.constant(a0.clone());
        let b = t.variable(b0);
        let h = t.hadamard(a, b).unwrap();
        let s = t.sum_all(h).unwrap();
        t.backward(s).unwrap();
        for (g, &av) in t.grad(b).data().iter().zip(a0.data()) {
            assert!((g - av).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![0.0, 0.0], vec![1f64.ln(), 3f64.ln()]]));
        let y = t.softmax_rows(x).unwrap();
        let d = t.data(y);
        assert!((d[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((d[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((d[(1, 0)] - 0.25).abs() < 1e-12);
        assert!((d[(1, 1)] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stabilized() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1000.0, 0.0]]));
        let y = t.softmax_rows(x).unwrap();
        let d = t.data(y);
        assert!(d.all_finite());
        assert!(d[(0, 0)] > 1.0 - 1e-12);
        assert!(d[(0, 1)] < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![f64::NAN, 0.0]]));
        assert!(matches!(t.softmax_rows(x), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_property() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let x: Matrix<f64> = rng.normal_matrix(4, 6, 0.0, 3.0);
            let mut t = Tape::new();
            let xi = t.constant(x);
            let y = t.softmax_rows(xi).unwrap();
            let d = t.data(y);
            for r in 0..d.rows() {
                let s: f64 = d.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!(d.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn concat_cols_identity_and_hand_value() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![1.0], vec![4.0]]));
        let single = t.concat_cols(&[a]).unwrap();
        assert_eq!(t.data(single), t.data(a));

        let b = t.constant(m(&[vec![1.0]]));
        let c = t.constant(m(&[vec![2.0]]));
        let d = t.constant(m(&[vec![3.0]]));
        let yc = t.concat_cols(&[b, c, d]).unwrap();
        assert_eq!(t.data(yc).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_cols_routes_gradients_per_block() {
        let mut rng = Rng::new(23);
        let parts: Vec<Matrix<f64>> = (0..3).map(|i| rng.normal_matrix(2, i + 1, 0.0, 1.0)).collect();
        let mut t = Tape::new();
        let ids: Vec<ValueId> = parts.iter().map(|p| t.variable(p.clone())).collect();
        let cat = t.concat_cols(&ids).unwrap();
        // Weight each column block differently so routing errors are visible.
        let mut w = Matrix::zeros(2, 6);
        for (j, v) in w.data_mut().iter_mut().enumerate() {
            *v = (j + 1) as f64;
        }
        let wid = t.constant(w.clone());
        let prod = t.hadamard(cat, wid).unwrap();
        let s = t.sum_all(prod).unwrap();
        t.backward(s).unwrap();
        let mut off = 0;
        for (i, p) in parts.iter().enumerate() {
            let g = t.grad(ids[i]);
            for r in 0..p.rows() {
                for c in 0..p.cols() {
                    assert_eq!(g[(r, c)], w[(r, off + c)]);
                }
            }
            off += p.cols();
        }
    }

    #[test]
    fn reduce_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![2.0, 4.0], vec![6.0, 8.0]]));
        let mean = t.mean_all(x).unwrap();
        assert_eq!(t.data(mean)[(0, 0)], 5.0);

        let z = t.constant(Matrix::zeros(3, 2));
        let s = t.sum_all(z).unwrap();
        assert_eq!(t.data(s)[(0, 0)], 0.0);

        let mr = t.mean_rows(x).unwrap();
        assert_eq!(t.data(mr).data(), &[4.0, 6.0]);
    }

    #[test]
    fn reduce_rejects_empty() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Matrix::zeros(0, 3));
        assert!(matches!(t.sum_all(x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mean_all_backward_distributes_uniformly() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = t.mean_all(x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_unreachable_stays_zero() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.0, 2.0]]));
        let y = t.variable(m(&[vec![5.0]]));
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| g == 0.0));
        assert_eq!(t.grad(y)[(0, 0)], 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.0, 2.0]]));
        assert!(matches!(t.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn backward_twice_accumulates_additively() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![3.0, -1.0]]));
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| g == 2.0));
        t.zero_grads();
        t.backward(s).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn shared_subgraph_accumulates_both_contributions() {
        // f(x) = sum(x ⊙ x) has gradient 2x.
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.5, -2.0, 0.5]]));
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x);
        assert_eq!(g.data(), &[3.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.0, 2.0]]));
        let c = t.constant(m(&[vec![5.0, 7.0]]));
        let h = t.hadamard(x, c).unwrap();
        let s = t.sum_all(h).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).data().iter().all(|&g| g == 0.0));
        assert!(!t.value(c).requires_grad);
        assert_eq!(t.grad(x).data(), &[5.0, 7.0]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![2.0, 3.0]]));
        let d = t.detach(x);
        let s = t.sum_all(d).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn operations_do_not_mutate_inputs() {
        let mut t = Tape::new();
        let data = m(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        let x = t.variable(data.clone());
        let y = t.relu(x);
        let _ = t.transpose(y);
        let _ = t.softmax_rows(x).unwrap();
        let other = t.constant(m(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        let _ = t.add(x, other).unwrap();
        assert_eq!(t.data(x), &data);
    }

    /// With finite forward data, every reachable gradient stays finite after
    /// backward from a scalar.
    #[test]
    fn backward_keeps_all_reachable_gradients_finite() {
        let mut rng = Rng::new(71);
        let mut t = Tape::new();
        let a = t.variable(rng.normal_matrix(4, 3, 0.0, 2.0));
        let b = t.variable(rng.normal_matrix(3, 4, 0.0, 2.0));
        let prod = t.matmul(a, b).unwrap();
        let act = t.sigmoid(prod);
        let sm = t.softmax_rows(act).unwrap();
        let eps = t.constant(Matrix::filled(4, 4, 1e-12));
        let shifted = t.add(sm, eps).unwrap();
        let lg = t.log(shifted).unwrap();
        let h = t.hadamard(lg, lg).unwrap();
        let loss = t.mean_all(h).unwrap();
        t.backward(loss).unwrap();
        for i in 0..t.len() {
            let v = t.value(ValueId(i));
            assert!(v.grad.all_finite(), "node {i} has a non-finite gradient");
        }
    }

    #[test]
    fn transpose_and_slice_backward() {
        let mut t = Tape::new();
        let x = t.variable(m(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let xt = t.transpose(x);
        let sl = t.slice(xt, 0..2, 1..2).unwrap(); // column 1 of xt = row 1 of x, first 2 entries
        let s = t.sum_all(sl).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x);
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_out_of_range() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(t.slice(x, 0..3, 0..2), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn affine_bias_broadcast_matches_manual() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]));
        let w = t.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = t.constant(m(&[vec![10.0, 20.0]]));
        let y = affine(&mut t, x, w, b).unwrap();
        let d = t.data(y);
        assert_eq!(d.row(0), &[11.0, 22.0]);
        assert_eq!(d.row(1), &[13.0, 24.0]);
        assert_eq!(d.row(2), &[18.0, 32.0]);
    }

    /// Every primitive's analytic gradient agrees with central differences on
    /// 20 random seeds.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed);
            let a: Matrix<f64> = rng.normal_matrix(3, 4, 0.0, 1.0);
            let b: Matrix<f64> = rng.normal_matrix(3, 4, 0.0, 1.0);
            let c: Matrix<f64> = rng.normal_matrix(4, 2, 0.0, 1.0);
            // Keep log inputs strictly positive and away from zero.
            let pos: Matrix<f64> = rng.uniform_matrix(3, 4, 0.5, 2.0);
            let opts = GradCheckOptions { eps: 1e-6, tol: 1e-6 };

            let checks: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[ValueId]) -> crate::error::Result<ValueId>>)> = vec![
                ("matmul", Box::new(|t, ids| {
                    let y = t.matmul(ids[0], ids[2])?;
                    t.sum_all(y)
                })),
                ("add", Box::new(|t, ids| {
                    let y = t.add(ids[0], ids[1])?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("sub", Box::new(|t, ids| {
                    let y = t.sub(ids[0], ids[1])?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("hadamard", Box::new(|t, ids| {
                    let y = t.hadamard(ids[0], ids[1])?;
                    t.sum_all(y)
                })),
                ("relu", Box::new(|t, ids| {
                    let y = t.relu(ids[0]);
                    t.sum_all(y)
                })),
                ("leaky_relu", Box::new(|t, ids| {
                    let y = t.leaky_relu(ids[0], 0.01);
                    t.sum_all(y)
                })),
                ("sigmoid", Box::new(|t, ids| {
                    let y = t.sigmoid(ids[0]);
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("tanh", Box::new(|t, ids| {
                    let y = t.tanh(ids[0]);
                    t.sum_all(y)
                })),
                ("exp", Box::new(|t, ids| {
                    let y = t.exp(ids[0]);
                    t.sum_all(y)
                })),
                ("negate", Box::new(|t, ids| {
                    let y = t.negate(ids[0]);
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("log", Box::new(|t, ids| {
                    let y = t.log(ids[3])?;
                    t.sum_all(y)
                })),
                ("softmax_rows", Box::new(|t, ids| {
                    let y = t.softmax_rows(ids[0])?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("concat_cols", Box::new(|t, ids| {
                    let y = t.concat_cols(&[ids[0], ids[1]])?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("concat_rows", Box::new(|t, ids| {
                    let y = t.concat_rows(&[ids[0], ids[1]])?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("mean_all", Box::new(|t, ids| {
                    let sq = t.hadamard(ids[0], ids[0])?;
                    t.mean_all(sq)
                })),
                ("mean_rows", Box::new(|t, ids| {
                    let y = t.mean_rows(ids[0])?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("scale", Box::new(|t, ids| {
                    let y = t.scale(ids[0], 2.5);
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
                ("transpose", Box::new(|t, ids| {
                    let y = t.transpose(ids[0]);
                    let z = t.matmul(ids[0], y)?;
                    t.sum_all(z)
                })),
                ("slice", Box::new(|t, ids| {
                    let y = t.slice(ids[0], 1..3, 0..2)?;
                    let sq = t.hadamard(y, y)?;
                    t.sum_all(sq)
                })),
            ];

            for (name, build) in checks {
                let report = grad_check(
                    |t, ids| build(t, ids),
                    &[
                        ("a", a.clone()),
                        ("b", b.clone()),
                        ("c", c.clone()),
                        ("pos", pos.clone()),
                    ],
                    opts,
                )
                .unwrap();
                assert!(
                    report.pass,
                    "{name} failed at seed {seed}: max rel err {}",
                    report.max_rel_err
                );
            }
        }
    }
}
