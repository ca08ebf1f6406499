use std::sync::Arc;

use super::kernels::{self, gelu_grad_scalar, gemm_into, layer_norm_with_cache, softmax_in_place, MatView};
use super::{shape_err, NumericsError, Real, Tensor};

/// Compressed sparse row matrix used as a constant operand (graph operators).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<Real>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut trip: Vec<(usize, usize, Real)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut values: Vec<Real> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, Real)> + '_ {
        let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.row_entries(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    /// `self · x` for a dense row-major `x` with `width` columns.
    pub fn mul_dense(&self, x: &[Real], width: usize) -> Vec<Real> {
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, a) in self.row_entries(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g`, accumulated into `out` (rows = self.cols).
    fn mul_dense_transposed_acc(&self, g: &[Real], width: usize, out: &mut [Real]) {
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, a) in self.row_entries(r) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<Real>, inv_std: Vec<Real> },
    Spmm(Arc<SparseMatrix>, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<Real> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of operations for one forward/backward pass.
///
/// A tape is consumed by [`Tape::backward`]; build a new one for every step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var, NumericsError> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = super::matmul_nt(self.value(a), self.value(b))?;
        self.push(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let out = kernels::add_row(self.value(x), self.value(row))?;
        self.push(out, Op::AddRow(x, row), &[x, row], "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var, NumericsError> {
        let out = kernels::scale(self.value(a), s)?;
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = kernels::gelu(self.value(a))?;
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = kernels::softmax_rows(self.value(a))?;
        self.push(out, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (out, cache) = layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta))?;
        let op = Op::LayerNorm { x, gamma, beta, normalized: cache.normalized, inv_std: cache.inv_std };
        self.push(out, op, &[x, gamma, beta], "layer_norm")
    }

    /// Sparse-constant times dense: `a · x`.
    pub fn spmm(&mut self, a: Arc<SparseMatrix>, x: Var) -> Result<Var, NumericsError> {
        let out = kernels::spmm(&a, self.value(x))?;
        self.push(out, Op::Spmm(a, x), &[x], "spmm")
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var, NumericsError> {
        let out = kernels::gather_rows(self.value(x), &idx)?;
        self.push(out, Op::GatherRows(x, idx), &[x], "gather_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let out = kernels::slice_cols(self.value(x), start, end)?;
        self.push(out, Op::SliceCols(x, start, end), &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_cols(&values)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    /// Per-row log-probabilities are clamped below at `ln 1e-12`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if rows == 0 {
            return Err(shape_err("softmax_cross_entropy", "no rows"));
        }
        if targets.len() != rows {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        t.check_finite("softmax_cross_entropy")?;
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        let floor = (1e-12 as Real).ln();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            if targets[r] >= cols {
                return Err(NumericsError::Index { op: "softmax_cross_entropy", index: targets[r], len: cols });
            }
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
            let logp = (row[targets[r]] - lse).max(floor);
            loss -= logp;
            softmax_in_place(row);
        }
        loss /= rows as Real;
        let op = Op::SoftmaxXent { logits, targets: targets.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, &[logits], "softmax_cross_entropy")
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let loss_shape = lt.shape().to_vec();
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let shape = self.nodes[v.0].value.shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Helper that accumulates `src` into the gradient slot of `v`.
        let acc = |grads: &mut [Option<Tensor>], v: Var, src: &[Real]| {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let dst = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
            for (d, s) in dst.data_mut().iter_mut().zip(src) {
                *d += s;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    // dA += G · Bᵀ
                    let dst = self.slot(grads, *a);
                    gemm_into(dst.data_mut(), MatView::of(g), MatView::of(tb).t(), 1.0);
                }
                if needs(*b) {
                    let dst = self.slot(grads, *b);
                    gemm_into(dst.data_mut(), MatView::of(ta).t(), MatView::of(g), 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    // C = A·Bᵀ ⇒ dA += G·B
                    let dst = self.slot(grads, *a);
                    gemm_into(dst.data_mut(), MatView::of(g), MatView::of(tb), 1.0);
                }
                if needs(*b) {
                    // dB += Gᵀ·A
                    let dst = self.slot(grads, *b);
                    gemm_into(dst.data_mut(), MatView::of(g).t(), MatView::of(ta), 1.0);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(grads, *a, g.data());
                }
                if needs(*b) {
                    acc(grads, *b, g.data());
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    acc(grads, *x, g.data());
                }
                if needs(*row) {
                    let cols = g.cols();
                    let mut colsum = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, v) in colsum.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(grads, *row, &colsum);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d: Vec<Real> = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<Real> = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<Real> = g.data().iter().map(|v| v * s).collect();
                acc(grads, *a, &d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d: Vec<Real> =
                    g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect();
                acc(grads, *a, &d);
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let cols = p.cols();
                let mut d = vec![0.0; p.len()];
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dot: Real = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for c in 0..cols {
                        d[r * cols + c] = pr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, &d);
            }
            Op::LayerNorm { x, gamma, beta, normalized, inv_std } => {
                let cols = g.cols();
                let rows = g.rows();
                let gam = self.value(*gamma).data();
                if needs(*beta) || needs(*gamma) {
                    let mut dbeta = vec![0.0; cols];
                    let mut dgamma = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.data()[r * cols + c];
                            dbeta[c] += gv;
                            dgamma[c] += gv * normalized[r * cols + c];
                        }
                    }
                    if needs(*beta) {
                        acc(grads, *beta, &dbeta);
                    }
                    if needs(*gamma) {
                        acc(grads, *gamma, &dgamma);
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let inv_d = 1.0 / cols as Real;
                    for r in 0..rows {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = g.data()[r * cols + c] * gam[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * normalized[r * cols + c];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for c in 0..cols {
                            let dxh = g.data()[r * cols + c] * gam[c];
                            dx[r * cols + c] =
                                inv_std[r] * (dxh - mean_dxh - normalized[r * cols + c] * mean_dxh_xh);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Spmm(a, x) => {
                let dst = self.slot(grads, *x);
                a.mul_dense_transposed_acc(g.data(), g.cols(), dst.data_mut());
            }
            Op::GatherRows(x, idx) => {
                let dst = self.slot(grads, *x);
                let cols = g.cols();
                for (r, &i) in idx.iter().enumerate() {
                    let d = &mut dst.data_mut()[i * cols..(i + 1) * cols];
                    for (dv, gv) in d.iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
            }
            Op::SliceCols(x, start, _end) => {
                let dst = self.slot(grads, *x);
                let width = dst.cols();
                let w = g.cols();
                for r in 0..g.rows() {
                    let d = &mut dst.data_mut()[r * width + start..r * width + start + w];
                    for (dv, gv) in d.iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let len = self.value(*a).len();
                acc(grads, *a, &vec![gv; len]);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let gv = g.data()[0];
                let cols = self.value(*logits).cols();
                let rows = targets.len();
                let scale = gv / rows as Real;
                let mut d: Vec<Real> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= scale;
                }
                acc(grads, *logits, &d);
            }
        }
        Ok(())
    }
}
