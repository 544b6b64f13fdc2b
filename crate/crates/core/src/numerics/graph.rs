//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly when an operation is added; [`Graph::backward`] then
//! walks the record in reverse and returns gradients for every parameter
//! that took part. Parameter values are borrowed from the
//! [`ParameterStore`], never copied into the graph.

use super::matrix::dot;
use super::{Gradients, Matrix, ParamId, ParameterStore};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One term of a negative log-likelihood: `-weight * ln(max(p[row, col], floor))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pick {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PairwiseAdd(Var, Var),
    Reshape(Var),
    MaskMul(Var, Vec<f64>),
    NegLogPick(Var, Vec<Pick>, f64),
    SumScalars(Vec<Var>),
}

struct Node {
    // `None` for parameters, whose value lives in the store
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward pass.
pub struct Backward {
    nodes: Vec<Option<Matrix>>,
    params: Gradients,
}

impl Backward {
    /// Gradient of the loss with respect to any recorded node.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes[var.0].as_ref()
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is reported by [`Backward::wrt`].
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(var) = self.param_vars[id.0] {
            return var;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulBt(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut value = self.value(x).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width mismatch");
        let cols = value.cols().max(1);
        for out in value.values_mut().chunks_exact_mut(cols) {
            for (o, b) in out.iter_mut().zip(r.values()) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), values).expect("shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols().max(1);
        for row in value.values_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), needs)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        assert_eq!(g.shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm bias shape");
        let mut normalized = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let n_row = normalized.row_mut(r);
            for (n, v) in n_row.iter_mut().zip(row) {
                *n = (v - mean) * inv;
            }
            let out = value.row_mut(r);
            for c in 0..cols {
                out[c] = g.values()[c] * normalized.get(r, c) + b.values()[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            values.extend_from_slice(pv.values());
            rows += pv.rows();
        }
        let value = Matrix::from_vec(rows, cols, values).expect("shape");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let xv = self.value(x);
        assert!(start + count <= xv.rows(), "slice_rows out of range");
        let value = xv.slice_rows(start, count);
        let needs = self.needs(x);
        self.push(value, Op::SliceRows(x, start), needs)
    }

    /// Columns `start..start + count`.
    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Var {
        let xv = self.value(x);
        assert!(start + count <= xv.cols(), "slice_cols out of range");
        let mut values = Vec::with_capacity(xv.rows() * count);
        for row in xv.row_iter() {
            values.extend_from_slice(&row[start..start + count]);
        }
        let value = Matrix::from_vec(xv.rows(), count, values).expect("shape");
        let needs = self.needs(x);
        self.push(value, Op::SliceCols(x, start), needs)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let mut values = Vec::with_capacity(indices.len() * xv.cols());
        for &i in indices {
            values.extend_from_slice(xv.row(i));
        }
        let value = Matrix::from_vec(indices.len(), xv.cols(), values).expect("shape");
        let needs = self.needs(x);
        self.push(value, Op::GatherRows(x, indices.to_vec()), needs)
    }

    /// For `a: K × d` and `b: N × d`, the `(K·N) × d` matrix whose row
    /// `k·N + j` is `a[k] + b[j]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "pairwise_add width mismatch");
        let (k, n, d) = (av.rows(), bv.rows(), av.cols());
        let mut value = Matrix::zeros(k * n, d);
        for i in 0..k {
            for j in 0..n {
                let out = value.row_mut(i * n + j);
                for ((o, x), y) in out.iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                    *o = x + y;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::PairwiseAdd(a, b), needs)
    }

    /// Same values in row-major order, new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let value = Matrix::from_vec(rows, cols, xv.values().to_vec()).expect("reshape size");
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "mask size mismatch");
        let values = xv.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), values).expect("shape");
        let needs = self.needs(x);
        self.push(value, Op::MaskMul(x, mask), needs)
    }

    /// Scalar `Σ -weight · ln(max(p, floor))` over the picked entries of a
    /// probability matrix.
    pub fn neg_log_pick(&mut self, probs: Var, picks: Vec<Pick>, floor: f64) -> Var {
        let pv = self.value(probs);
        let total: f64 = picks
            .iter()
            .map(|p| -p.weight * pv.get(p.row, p.col).max(floor).ln())
            .sum();
        let needs = self.needs(probs);
        self.push(Matrix::scalar(total), Op::NegLogPick(probs, picks, floor), needs)
    }

    /// Sum of `1 × 1` nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.value(p).item()).sum();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::scalar(total), Op::SumScalars(parts.to_vec()), needs)
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut params = Gradients::with_capacity(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(gy);
                continue;
            }
            self.propagate(&node.op, i, &gy, &mut grads);
            if let Op::Param(id) = node.op {
                params.add(id, gy.clone());
            }
            grads[i] = Some(gy);
        }
        Backward { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, index: usize, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = || self.value(Var(index));
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.matmul_bt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_at(gy));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gy.clone());
                if self.needs(*row) {
                    let mut sums = vec![0.0; gy.cols()];
                    for r in gy.row_iter() {
                        for (s, v) in sums.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *row, Matrix::row_vector(sums));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip_map(gy, vb, |g, v| g * v));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, zip_map(gy, va, |g, v| g * v));
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, gy.map(|g| g * factor));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip_map(gy, y(), |g, s| g * s * (1.0 - s)));
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, zip_map(gy, y(), |g, t| g * (1.0 - t * t)));
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, zip_map(gy, y(), |g, v| if v > 0.0 { g } else { 0.0 }));
            }
            Op::SoftmaxRows(x) => {
                let yv = y();
                let mut gx = Matrix::zeros(yv.rows(), yv.cols());
                for r in 0..yv.rows() {
                    let (yr, gr) = (yv.row(r), gy.row(r));
                    let s = dot(yr, gr);
                    for (o, (p, g)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (g - s);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = normalized.shape();
                let g = self.value(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut g_gamma = vec![0.0; cols];
                    let mut g_beta = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            g_gamma[c] += gy.get(r, c) * normalized.get(r, c);
                            g_beta[c] += gy.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gamma, Matrix::row_vector(g_gamma));
                    self.accumulate(grads, *beta, Matrix::row_vector(g_beta));
                }
                if self.needs(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let g_hat: Vec<f64> = (0..cols).map(|c| gy.get(r, c) * g.values()[c]).collect();
                        let mean_g = g_hat.iter().sum::<f64>() / n;
                        let mean_gx = dot(&g_hat, normalized.row(r)) / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (g_hat[c] - mean_g - normalized.get(r, c) * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Matrix::zeros(gy.rows(), w);
                        for r in 0..gy.rows() {
                            gp.row_mut(r).copy_from_slice(&gy.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs(p) {
                        self.accumulate(grads, p, gy.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                gx.values_mut()[start * cols..start * cols + gy.len()].copy_from_slice(gy.values());
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    gx.row_mut(r)[*start..start + gy.cols()].copy_from_slice(gy.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, indices) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Matrix::zeros(rows, cols);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, g) in gx.row_mut(i).iter_mut().zip(gy.row(k)) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PairwiseAdd(a, b) => {
                let (k, d) = self.shape(*a);
                let n = self.shape(*b).0;
                let mut ga = Matrix::zeros(k, d);
                let mut gb = Matrix::zeros(n, d);
                for i in 0..k {
                    for j in 0..n {
                        let g = gy.row(i * n + j);
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g) {
                            *o += v;
                        }
                        for (o, v) in gb.row_mut(j).iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Reshape(x) => {
                let (rows, cols) = self.shape(*x);
                let gx = Matrix::from_vec(rows, cols, gy.values().to_vec()).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::MaskMul(x, mask) => {
                let values = gy.values().iter().zip(mask).map(|(g, m)| g * m).collect();
                let gx = Matrix::from_vec(gy.rows(), gy.cols(), values).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::NegLogPick(probs, picks, floor) => {
                let pv = self.value(*probs);
                let scale = gy.item();
                let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                for pick in picks {
                    let p = pv.get(pick.row, pick.col);
                    if p > *floor {
                        let cur = gp.get(pick.row, pick.col);
                        gp.set(pick.row, pick.col, cur - scale * pick.weight / p);
                    }
                }
                self.accumulate(grads, *probs, gp);
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, gy.clone());
                }
            }
        }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), values).expect("shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of a non-empty slice, shifted by its maximum.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(inputs) for a graph builder
    /// that reduces to a scalar through a fixed random projection.
    fn check_inputs(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let eval = |inputs: &[Matrix], probe: Option<&Matrix>| -> (f64, Vec<Matrix>, Matrix) {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
            let out = build(&mut g, &vars);
            let (rows, cols) = g.shape(out);
            let probe = probe
                .cloned()
                .unwrap_or_else(|| Matrix::from_vec(rows, cols, vec![0.0; rows * cols]).unwrap());
            let w = g.input(probe.clone());
            let prod = g.mul(out, w);
            let ones = g.input(Matrix::filled(1, rows, 1.0));
            let col_sum = g.matmul(ones, prod);
            let ones_c = g.input(Matrix::filled(1, cols, 1.0));
            let loss = g.matmul_bt(col_sum, ones_c);
            let back = g.backward(loss);
            let grads = vars.iter().map(|&v| back.wrt(v).unwrap().clone()).collect();
            (g.value(loss).item(), grads, probe)
        };
        let (_, _, shape_probe) = eval(&inputs, None);
        let probe = random(&mut rng, shape_probe.rows(), shape_probe.cols());
        let (_, analytic, _) = eval(&inputs, Some(&probe));
        let eps = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            for j in 0..m.len() {
                let mut plus = inputs.clone();
                plus[i].values_mut()[j] += eps;
                let mut minus = inputs.clone();
                minus[i].values_mut()[j] -= eps;
                let numeric = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * eps);
                let a = analytic[i].values()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-6,
                    "input {i} coord {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_inputs(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |g, v| {
            g.matmul(v[0], v[1])
        });
        check_inputs(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |g, v| {
            g.matmul_bt(v[0], v[1])
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_inputs(vec![random(&mut rng, 2, 3), random(&mut rng, 2, 3)], |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let m = g.mul(s, t);
            let a = g.add(m, v[0]);
            g.scale(a, 0.7)
        });
        check_inputs(vec![random(&mut rng, 3, 3), random(&mut rng, 1, 3)], |g, v| {
            let r = g.add_row(v[0], v[1]);
            g.relu(r)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_inputs(vec![random(&mut rng, 3, 5)], |g, v| g.softmax_rows(v[0]));
        check_inputs(
            vec![random(&mut rng, 3, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4)],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_inputs(vec![random(&mut rng, 4, 3), random(&mut rng, 2, 3)], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]);
            let s = g.slice_rows(c, 1, 4);
            let gathered = g.gather_rows(s, &[3, 0, 3, 1]);
            let cols = g.slice_cols(gathered, 1, 2);
            let wide = g.concat_cols(&[cols, gathered]);
            g.reshape(wide, 5, 4)
        });
        check_inputs(vec![random(&mut rng, 2, 3), random(&mut rng, 4, 3)], |g, v| {
            g.pairwise_add(v[0], v[1])
        });
    }

    #[test]
    fn neg_log_pick_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_inputs(vec![random(&mut rng, 3, 4)], |g, v| {
            let p = g.softmax_rows(v[0]);
            let picks = vec![
                Pick {
                    row: 0,
                    col: 1,
                    weight: 1.0,
                },
                Pick {
                    row: 2,
                    col: 3,
                    weight: 0.5,
                },
                Pick {
                    row: 2,
                    col: 3,
                    weight: 2.0,
                },
            ];
            let a = g.neg_log_pick(p, picks, 1e-12);
            let b = g.neg_log_pick(
                p,
                vec![Pick {
                    row: 1,
                    col: 0,
                    weight: 1.0,
                }],
                1e-12,
            );
            g.sum_scalars(&[a, b])
        });
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let mut row = vec![1000.0, 0.0];
        softmax_in_place(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-12 && row[1] >= 0.0 && row[1] < 1e-300);
        let mut a = vec![0.3, -1.2, 2.5];
        let mut b: Vec<f64> = a.iter().map(|v| v + 17.0).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parameters_collect_gradients_once_per_use() {
        let mut store = ParameterStore::new();
        let w = store.insert("w", Matrix::scalar(3.0)).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let sq = g.mul(a, b);
        let back = g.backward(sq);
        assert_eq!(back.params().get(w).unwrap().item(), 6.0);
    }
}
