//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation together with the intermediates its
//! backward pass needs. Values are computed eagerly on push, so a tape used
//! purely for inference costs one forward pass plus bookkeeping.
//! [`Tape::backward`] consumes the tape: each forward cache is read exactly
//! once and dropped.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Exp(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    DiagNll(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct TapeGrads {
    grads: Vec<Option<Matrix>>,
}

impl TapeGrads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds the single-row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if self.shape(b) != (1, ac) {
            return Err(shape_err("add_row", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..ar {
            for (x, bb) in value.row_mut(r).iter_mut().zip(&bias) {
                *x += bb;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).get(0, 0);
        let value = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::invalid("softmax over an empty row"));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each 1×cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                value.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {cols}",
                start + len
            )));
        }
        let x = self.value(a);
        let mut value = Matrix::zeros(rows, len);
        for r in 0..rows {
            value
                .row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::invalid("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of {rows}",
                start + len
            )));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Matrix::from_vec(len, cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::invalid("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(ids.len(), cols, data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            norms.push(n);
            let row = value.row_mut(r);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows { x, norms }, rg)
    }

    /// Mean over rows of `-log softmax(s_i)[i]` for a square logit matrix.
    pub fn diag_nll(&mut self, s: Var) -> Result<Var> {
        let (rows, cols) = self.shape(s);
        if rows != cols || rows == 0 {
            return Err(Error::invalid(format!(
                "diag_nll needs a nonempty square matrix, got {rows}x{cols}"
            )));
        }
        let sv = self.value(s);
        let mut total = 0.0;
        for r in 0..rows {
            let row = sv.row(r);
            total += log_sum_exp(row) - row[r];
        }
        let value = Matrix::filled(1, 1, total / rows as f64);
        let rg = self.rg(s);
        Ok(self.push(value, Op::DiagNll(s), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("mean of an empty matrix"));
        }
        let value = Matrix::filled(1, 1, x.sum() / x.data().len() as f64);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Back-propagates from `seeds` (node, upstream gradient) pairs.
    pub fn backward(self, seeds: &[(Var, Matrix)]) -> Result<TapeGrads> {
        let mut nodes = self.nodes;
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if nodes[v.0].value.shape() != g.shape() {
                return Err(shape_err("backward seed", nodes[v.0].value.shape(), g.shape()));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &mut nodes[idx];
            let op = std::mem::replace(&mut node.op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            let y = std::mem::replace(&mut node.value, Matrix::zeros(0, 0));
            propagate(&nodes, &mut grads, op, &y, &gy)?;
            nodes[idx].value = y;
        }
        Ok(TapeGrads { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(
    nodes: &[Node],
    grads: &mut [Option<Matrix>],
    op: Op,
    y: &Matrix,
    gy: &Matrix,
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if rg(a) {
                accumulate(grads, a, gy.matmul_t(val(b))?);
            }
            if rg(b) {
                accumulate(grads, b, val(a).t_matmul(gy)?);
            }
        }
        Op::MatMulT(a, b) => {
            // y = a bᵀ
            if rg(a) {
                accumulate(grads, a, gy.matmul(val(b))?);
            }
            if rg(b) {
                accumulate(grads, b, gy.t_matmul(val(a))?);
            }
        }
        Op::Transpose(a) => accumulate(grads, a, gy.transpose()),
        Op::Add(a, b) => {
            if rg(a) {
                accumulate(grads, a, gy.clone());
            }
            if rg(b) {
                accumulate(grads, b, gy.clone());
            }
        }
        Op::AddRow(a, b) => {
            if rg(a) {
                accumulate(grads, a, gy.clone());
            }
            if rg(b) {
                let mut col_sum = vec![0.0; gy.cols()];
                for r in 0..gy.rows() {
                    for (s, g) in col_sum.iter_mut().zip(gy.row(r)) {
                        *s += g;
                    }
                }
                accumulate(grads, b, Matrix::row_vector(&col_sum));
            }
        }
        Op::Scale(a, s) => accumulate(grads, a, gy.scale(s)),
        Op::AddScalar(a) => accumulate(grads, a, gy.clone()),
        Op::MulScalar(a, s) => {
            let sv = val(s).get(0, 0);
            if rg(a) {
                accumulate(grads, a, gy.scale(sv));
            }
            if rg(s) {
                let d = dot(gy.data(), val(a).data());
                accumulate(grads, s, Matrix::filled(1, 1, d));
            }
        }
        Op::Exp(a) => {
            let mut g = gy.clone();
            g.data_mut().iter_mut().zip(y.data()).for_each(|(g, y)| *g *= y);
            accumulate(grads, a, g);
        }
        Op::Tanh(a) => {
            let mut g = gy.clone();
            g.data_mut()
                .iter_mut()
                .zip(y.data())
                .for_each(|(g, y)| *g *= 1.0 - y * y);
            accumulate(grads, a, g);
        }
        Op::SoftmaxRows(a) => {
            let mut g = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = gy.row(r);
                let s = dot(yr, gr);
                for (o, (yv, gv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = yv * (gv - s);
                }
            }
            accumulate(grads, a, g);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (rows, cols) = xhat.shape();
            if rg(gamma) {
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c] += gy.get(r, c) * xhat.get(r, c);
                    }
                }
                accumulate(grads, gamma, Matrix::row_vector(&dg));
            }
            if rg(beta) {
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for (d, g) in db.iter_mut().zip(gy.row(r)) {
                        *d += g;
                    }
                }
                accumulate(grads, beta, Matrix::row_vector(&db));
            }
            if rg(x) {
                let g = val(gamma).data();
                let n = cols as f64;
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dxhat: Vec<f64> = (0..cols).map(|c| gy.get(r, c) * g[c]).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        let v = inv_std[r] / n * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                        dx.set(r, c, v);
                    }
                }
                accumulate(grads, x, dx);
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = val(a).shape();
            let mut g = Matrix::zeros(rows, cols);
            let len = gy.cols();
            for r in 0..rows {
                g.row_mut(r)[start..start + len].copy_from_slice(gy.row(r));
            }
            accumulate(grads, a, g);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let (rows, cols) = val(p).shape();
                if rg(p) {
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + cols]);
                    }
                    accumulate(grads, p, g);
                }
                off += cols;
            }
        }
        Op::SliceRows(a, start) => {
            let (rows, cols) = val(a).shape();
            let mut g = Matrix::zeros(rows, cols);
            let len = gy.rows();
            g.data_mut()[start * cols..(start + len) * cols].copy_from_slice(gy.data());
            accumulate(grads, a, g);
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let (rows, cols) = val(p).shape();
                if rg(p) {
                    let data = gy.data()[off * cols..(off + rows) * cols].to_vec();
                    accumulate(grads, p, Matrix::from_vec(rows, cols, data)?);
                }
                off += rows;
            }
        }
        Op::GatherRows(table, ids) => {
            let (rows, cols) = val(table).shape();
            let mut g = Matrix::zeros(rows, cols);
            for (k, &i) in ids.iter().enumerate() {
                for (o, v) in g.row_mut(i).iter_mut().zip(gy.row(k)) {
                    *o += v;
                }
            }
            accumulate(grads, table, g);
        }
        Op::NormalizeRows { x, norms } => {
            let mut g = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                if norms[r] == 0.0 {
                    continue;
                }
                let yr = y.row(r);
                let gr = gy.row(r);
                let s = dot(yr, gr);
                for (o, (yv, gv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = (gv - yv * s) / norms[r];
                }
            }
            accumulate(grads, x, g);
        }
        Op::DiagNll(s) => {
            let sv = val(s);
            let n = sv.rows();
            let upstream = gy.get(0, 0) / n as f64;
            let mut g = sv.clone();
            for r in 0..n {
                let row = g.row_mut(r);
                softmax_in_place(row);
                row[r] -= 1.0;
                row.iter_mut().for_each(|v| *v *= upstream);
            }
            accumulate(grads, s, g);
        }
        Op::Mean(a) => {
            let (rows, cols) = val(a).shape();
            let v = gy.get(0, 0) / (rows * cols) as f64;
            accumulate(grads, a, Matrix::filled(rows, cols, v));
        }
    }
    Ok(())
}

/// Max-shifted softmax, in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
