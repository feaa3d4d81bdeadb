//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive in execution order together with the
//! operands its adjoint needs. Because inputs are always recorded before
//! the nodes that consume them, walking the node list backwards from the
//! loss is a valid reverse topological order: each node is visited once and
//! its gradient is complete by the time it is visited.

use std::borrow::Cow;

use super::kernels::{self, Mask};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, scale: f64 },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    LnClamped { x: Var, floor: f64 },
    Element { x: Var, row: usize, col: usize },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Constants may borrow their storage (frozen model
/// weights are recorded without copying); trainable leaves own theirs.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materialises zeros for unreached leaves.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    /// Records a borrowed constant (no gradient).
    pub fn constant(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    /// Records an owned constant (no gradient).
    pub fn constant_owned(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient [`backward`](Self::backward)
    /// reports.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    /// Records a borrowed trainable leaf.
    pub fn param_ref(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 x cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(r));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", am.shape(), rm.shape()),
            ));
        }
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        Ok(self.derived(out, Op::AddRow(a, r), &[a, r]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(a), &[a])
    }

    /// Row softmax of `scale · x`, optionally masked.
    pub fn softmax_rows(&mut self, x: Var, scale: f64, mask: Option<&Mask>) -> Result<Var> {
        let out = match mask {
            Some(m) => kernels::softmax_rows_masked(self.value(x), scale, m)?,
            None => kernels::softmax_rows(self.value(x), scale)?,
        };
        Ok(self.derived(out, Op::Softmax { x, scale }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::log_softmax_rows(self.value(x));
        self.derived(out, Op::LogSoftmax(x), &[x])
    }

    /// Row-wise layer norm with `1 x cols` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xm.cols()) || b.shape() != (1, xm.cols()) {
            return Err(Error::shape(
                "layer_norm_rows",
                format!("x {:?} gain {:?} bias {:?}", xm.shape(), g.shape(), b.shape()),
            ));
        }
        if xm.cols() == 0 {
            return Err(Error::Empty("layer_norm input"));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps {eps}")));
        }
        let (rows, cols) = xm.shape();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (h, s) = kernels::normalize(xm.row(r), eps);
            for ((hv, gv), bv) in h.iter().zip(g.as_slice()).zip(b.as_slice()) {
                out.push(hv * gv + bv);
            }
            xhat.extend(h);
            inv_std.push(s);
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: Matrix::from_raw(rows, cols, xhat),
            inv_std,
        };
        Ok(self.derived(Matrix::from_raw(rows, cols, out), op, &[x, gain, bias]))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(Error::Empty("concat_cols"))?;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{} rows vs {}", m.rows(), rows),
                ));
            }
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(x);
        if start + len > m.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} > {}", m.cols()),
            ));
        }
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Selects rows (repeats allowed) in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        Ok(self.derived(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.derived(Matrix::from_raw(1, 1, vec![s]), Op::Sum(x), &[x])
    }

    /// `ln(max(x, floor))` elementwise; the gradient is zero where clamped.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.derived(out, Op::LnClamped { x, floor }, &[x])
    }

    /// Single entry as a `1 x 1` node.
    pub fn element(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let m = self.value(x);
        if row >= m.rows() || col >= m.cols() {
            return Err(Error::shape(
                "element",
                format!("({row},{col}) outside {:?}", m.shape()),
            ));
        }
        let v = m.get(row, col);
        Ok(self.derived(Matrix::from_raw(1, 1, vec![v]), Op::Element { x, row, col }, &[x]))
    }

    /// Reverse sweep from a scalar (`1 x 1`) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward seed must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = kernels::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    let ga = kernels::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*r) {
                    let mut col = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (c, v) in col.iter_mut().zip(g.row(i)) {
                            *c += v;
                        }
                    }
                    self.accumulate(grads, *r, Matrix::from_raw(1, g.cols(), col));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scaled(*s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let out = g.zip_with_mask(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, out);
            }
            Op::Softmax { x, scale } => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = scale * yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gvec = self.value(*gain).as_slice();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g.get(r, c) * xhat.get(r, c);
                            gb[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, Matrix::from_raw(1, cols, gg));
                    self.accumulate(grads, *bias, Matrix::from_raw(1, cols, gb));
                }
                if self.wants(*x) {
                    let n = cols as f64;
                    let mut out = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gvec).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, d), h) in out.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv_std[r] * (d - mean_d - h * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, out);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut part = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, out);
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = self.shape(*x);
                let mut out = Matrix::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::filled(rows, cols, g.get(0, 0)));
            }
            Op::LnClamped { x, floor } => {
                let xv = self.value(*x);
                let out = g.zip_with_mask(xv, |gv, v| if v > *floor { gv / v } else { 0.0 });
                self.accumulate(grads, *x, out);
            }
            Op::Element { x, row, col } => {
                let (rows, cols) = self.shape(*x);
                let mut out = Matrix::zeros(rows, cols);
                out.data_mut()[row * cols + col] = g.get(0, 0);
                self.accumulate(grads, *x, out);
            }
        }
        Ok(())
    }
}

impl Matrix {
    fn zip_with_mask(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows(),
            self.cols(),
            self.as_slice()
                .iter()
                .zip(other.as_slice())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}
