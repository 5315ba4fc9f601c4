//! Reverse-mode gradients on a tape of matrix operations.
//!
//! Every forward pass records into a [`Tape`]; `backward` walks the nodes in
//! reverse creation order and accumulates gradients for the trainable leaf
//! parameters. The op set is exactly what the encoder and the training losses
//! need — no broadcasting rules beyond the row broadcast used for residual
//! summary injection.
//!
//! Correctness contract: every op passes [`grad_check`] against central
//! finite differences at 1e-5 in double precision.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `mat + row` with the 1×d row added to every row of the L×d matrix.
    AddBroadcastRow(Var, Var),
    /// `mat` with the 1×d vector added to a single row.
    AddRowAt { mat: Var, row: usize, vec: Var },
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Relu(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: f64 },
    SoftmaxRows(Var),
    /// 1×n → 1×1 log-sum-exp.
    LogSumExpRow(Var),
    /// L×d → 1×d column means.
    MeanRows(Var),
    /// Element-wise mean of same-shape 1×d vectors.
    PoolMean(Vec<Var>),
    /// Element-wise max of same-shape 1×d vectors; first argmax wins.
    PoolMax(Vec<Var>),
    ColsSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    RowSlice { x: Var, row: usize },
    /// 1×d → 1×d division by the Euclidean norm.
    L2NormalizeRow(Var),
    /// 1×d → 1×1 Euclidean norm.
    L2NormRow(Var),
    Dot(Var, Var),
    /// Fixed-weight inner product with a constant vector.
    DotConst(Var, Vec<f64>),
    /// Sum of same-shape terms.
    AddN(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recording tape. Build a scalar loss, then call [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    trainables: BTreeMap<String, Var>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), trainables: BTreeMap::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// Leaf that never receives a gradient entry in the result map.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf tied to a parameter path. Trainable leaves appear in the gradient
    /// map returned by [`Tape::backward`].
    pub fn param(&mut self, path: &str, value: Matrix, trainable: bool) -> Result<Var> {
        let var = self.push(value, Op::Leaf);
        if trainable {
            if self.trainables.contains_key(path) {
                return Err(Error::Validation(format!("parameter {path} recorded twice")));
            }
            self.trainables.insert(path.to_string(), var);
        }
        Ok(var)
    }

    /// Record every parameter of a store onto the tape, keyed by path.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for (path, value) in params.iter() {
            let var = self.param(path, value.clone(), params.is_trainable(path))?;
            vars.insert(path.clone(), var);
        }
        Ok(vars)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Add a 1×d row vector to every row of an L×d matrix.
    pub fn add_broadcast_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (l, d) = self.value(mat).shape();
        if self.value(row).shape() != (1, d) {
            return Err(Error::Dimension("broadcast row must be 1×cols".into()));
        }
        let mut value = self.value(mat).clone();
        for r in 0..l {
            for c in 0..d {
                let add = self.nodes[row.0].value.get(0, c);
                value.set(r, c, value.get(r, c) + add);
            }
        }
        Ok(self.push(value, Op::AddBroadcastRow(mat, row)))
    }

    /// Add a 1×d vector to one row of an L×d matrix.
    pub fn add_row_at(&mut self, mat: Var, row: usize, vec: Var) -> Result<Var> {
        let (l, d) = self.value(mat).shape();
        if self.value(vec).shape() != (1, d) {
            return Err(Error::Dimension("row addend must be 1×cols".into()));
        }
        if row >= l {
            return Err(Error::Dimension("row index out of range".into()));
        }
        let mut value = self.value(mat).clone();
        for c in 0..d {
            let add = self.nodes[vec.0].value.get(0, c);
            value.set(row, c, value.get(row, c) + add);
        }
        Ok(self.push(value, Op::AddRowAt { mat, row, vec }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v += c;
        }
        self.push(value, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = gelu(*v);
        }
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(a))
    }

    /// Per-row layer normalization with an affine gain/bias (both 1×d).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (l, d) = self.value(x).shape();
        if self.value(gain).shape() != (1, d) || self.value(bias).shape() != (1, d) {
            return Err(Error::Dimension("layer norm affine must be 1×cols".into()));
        }
        let mut value = Matrix::zeros(l, d);
        for r in 0..l {
            let row = self.value(x).row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_sigma = 1.0 / libm::sqrt(var + eps);
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_sigma;
                let g = self.nodes[gain.0].value.get(0, c);
                let b = self.nodes[bias.0].value.get(0, c);
                value.set(r, c, g * xhat + b);
            }
        }
        Ok(self.push(value, Op::LayerNormRows { x, gain, bias, eps }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (l, d) = self.value(a).shape();
        let mut value = Matrix::zeros(l, d);
        for r in 0..l {
            let row = self.value(a).row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
            let mut denom = 0.0;
            for c in 0..d {
                denom += libm::exp(row[c] - max);
            }
            for c in 0..d {
                value.set(r, c, libm::exp(row[c] - max) / denom);
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Log-sum-exp of a 1×n row, returned as a 1×1 scalar.
    pub fn log_sum_exp_row(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() != 1 {
            return Err(Error::Dimension("log_sum_exp_row expects a row vector".into()));
        }
        let row = self.value(a).row(0);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
        let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
        let value = Matrix::from_vec(1, 1, vec![max + libm::log(sum)])?;
        Ok(self.push(value, Op::LogSumExpRow(a)))
    }

    /// Column means: L×d → 1×d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (l, d) = self.value(a).shape();
        let mut value = Matrix::zeros(1, d);
        for c in 0..d {
            let mut acc = 0.0;
            for r in 0..l {
                acc += self.value(a).get(r, c);
            }
            value.set(0, c, acc / l as f64);
        }
        self.push(value, Op::MeanRows(a))
    }

    /// Element-wise mean over same-shape row vectors.
    pub fn pool_mean(&mut self, items: &[Var]) -> Result<Var> {
        let shape = self.pool_shape(items)?;
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &v in items {
            value = value.add(self.value(v))?;
        }
        let value = value.scale(1.0 / items.len() as f64);
        Ok(self.push(value, Op::PoolMean(items.to_vec())))
    }

    /// Element-wise max over same-shape row vectors.
    pub fn pool_max(&mut self, items: &[Var]) -> Result<Var> {
        let shape = self.pool_shape(items)?;
        let mut value = self.value(items[0]).clone();
        for &v in &items[1..] {
            for (o, &n) in value.data_mut().iter_mut().zip(self.nodes[v.0].value.data()) {
                if n > *o {
                    *o = n;
                }
            }
        }
        debug_assert_eq!(value.shape(), shape);
        Ok(self.push(value, Op::PoolMax(items.to_vec())))
    }

    fn pool_shape(&self, items: &[Var]) -> Result<(usize, usize)> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("pooling over an empty list".into()))?;
        let shape = self.value(*first).shape();
        for &v in items {
            if self.value(v).shape() != shape {
                return Err(Error::Dimension("pooled vectors must share a shape".into()));
            }
        }
        Ok(shape)
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn cols_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (l, d) = self.value(x).shape();
        if start + len > d {
            return Err(Error::Dimension("column slice out of range".into()));
        }
        let mut value = Matrix::zeros(l, len);
        for r in 0..l {
            for c in 0..len {
                value.set(r, c, self.value(x).get(r, start + c));
            }
        }
        Ok(self.push(value, Op::ColsSlice { x, start }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, items: &[Var]) -> Result<Var> {
        let rows = self
            .value(*items.first().ok_or_else(|| Error::Dimension("empty concat".into()))?)
            .rows();
        let total: usize = items.iter().map(|&v| self.value(v).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &v in items {
            let m = &self.nodes[v.0].value;
            if m.rows() != rows {
                return Err(Error::Dimension("concat rows mismatch".into()));
            }
            for r in 0..rows {
                for c in 0..m.cols() {
                    value.set(r, offset + c, m.get(r, c));
                }
            }
            offset += m.cols();
        }
        Ok(self.push(value, Op::ConcatCols(items.to_vec())))
    }

    /// Row `row` of a matrix as a 1×d vector.
    pub fn row_slice(&mut self, x: Var, row: usize) -> Result<Var> {
        let (l, d) = self.value(x).shape();
        if row >= l {
            return Err(Error::Dimension("row slice out of range".into()));
        }
        let mut value = Matrix::zeros(1, d);
        for c in 0..d {
            value.set(0, c, self.value(x).get(row, c));
        }
        Ok(self.push(value, Op::RowSlice { x, row }))
    }

    /// Divide a 1×d row by its Euclidean norm. Errors on a zero-norm input.
    pub fn l2_normalize_row(&mut self, x: Var) -> Result<Var> {
        let norm = self.row_norm(x)?;
        if norm == 0.0 {
            return Err(Error::Numeric("cannot normalize a zero-norm vector".into()));
        }
        let value = self.value(x).scale(1.0 / norm);
        Ok(self.push(value, Op::L2NormalizeRow(x)))
    }

    /// Euclidean norm of a 1×d row as a 1×1 scalar.
    pub fn l2_norm_row(&mut self, x: Var) -> Result<Var> {
        let norm = self.row_norm(x)?;
        let value = Matrix::from_vec(1, 1, vec![norm])?;
        Ok(self.push(value, Op::L2NormRow(x)))
    }

    fn row_norm(&self, x: Var) -> Result<f64> {
        if self.value(x).rows() != 1 {
            return Err(Error::Dimension("norm expects a row vector".into()));
        }
        Ok(libm::sqrt(self.value(x).row(0).iter().map(|v| v * v).sum()))
    }

    /// Inner product of two 1×d rows as a 1×1 scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() || self.value(a).rows() != 1 {
            return Err(Error::Dimension("dot expects matching row vectors".into()));
        }
        let s = self
            .value(a)
            .row(0)
            .iter()
            .zip(self.value(b).row(0))
            .map(|(x, y)| x * y)
            .sum();
        let value = Matrix::from_vec(1, 1, vec![s])?;
        Ok(self.push(value, Op::Dot(a, b)))
    }

    /// Inner product with a constant weight vector.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if self.value(a).rows() != 1 || self.value(a).cols() != weights.len() {
            return Err(Error::Dimension("dot_const length mismatch".into()));
        }
        let s = self.value(a).row(0).iter().zip(weights).map(|(x, w)| x * w).sum();
        let value = Matrix::from_vec(1, 1, vec![s])?;
        Ok(self.push(value, Op::DotConst(a, weights.to_vec())))
    }

    /// Sum of same-shape terms.
    pub fn add_n(&mut self, items: &[Var]) -> Result<Var> {
        let shape = self.pool_shape(items)?;
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &v in items {
            value = value.add(self.value(v))?;
        }
        Ok(self.push(value, Op::AddN(items.to_vec())))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every trainable
    /// leaf registered through [`Tape::param`], keyed by path; a trainable
    /// leaf the loss does not depend on gets a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Matrix>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Dimension("backward expects a scalar loss".into()));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Gradient may still be needed by path lookups below.
            grads[idx] = Some(g.clone());
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value.transpose())?;
                    let gb = self.nodes[a.0].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::AddBroadcastRow(mat, row) => {
                    let (l, d) = g.shape();
                    let mut grow = Matrix::zeros(1, d);
                    for c in 0..d {
                        let mut acc = 0.0;
                        for r in 0..l {
                            acc += g.get(r, c);
                        }
                        grow.set(0, c, acc);
                    }
                    accumulate(&mut grads, *mat, g)?;
                    accumulate(&mut grads, *row, grow)?;
                }
                Op::AddRowAt { mat, row, vec } => {
                    let d = g.cols();
                    let mut gvec = Matrix::zeros(1, d);
                    for c in 0..d {
                        gvec.set(0, c, g.get(*row, c));
                    }
                    accumulate(&mut grads, *vec, gvec)?;
                    accumulate(&mut grads, *mat, g)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::AddConst(a) => accumulate(&mut grads, *a, g)?,
                Op::Gelu(a) => {
                    let mut ga = g;
                    for (gv, x) in ga.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *gv *= gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (gv, x) in ga.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        if *x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let (l, d) = self.nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(l, d);
                    let mut ggain = Matrix::zeros(1, d);
                    let mut gbias = Matrix::zeros(1, d);
                    for r in 0..l {
                        let row = self.nodes[x.0].value.row(r);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_sigma = 1.0 / libm::sqrt(var + eps);
                        let mut mean_u = 0.0;
                        let mut mean_ux = 0.0;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_sigma;
                            let u = self.nodes[gain.0].value.get(0, c) * g.get(r, c);
                            mean_u += u;
                            mean_ux += u * xhat;
                            ggain.set(0, c, ggain.get(0, c) + g.get(r, c) * xhat);
                            gbias.set(0, c, gbias.get(0, c) + g.get(r, c));
                        }
                        mean_u /= d as f64;
                        mean_ux /= d as f64;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * inv_sigma;
                            let u = self.nodes[gain.0].value.get(0, c) * g.get(r, c);
                            gx.set(r, c, inv_sigma * (u - mean_u - xhat * mean_ux));
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gain, ggain)?;
                    accumulate(&mut grads, *bias, gbias)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let (l, d) = y.shape();
                    let mut ga = Matrix::zeros(l, d);
                    for r in 0..l {
                        let dot: f64 =
                            (0..d).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..d {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LogSumExpRow(a) => {
                    let row = self.nodes[a.0].value.row(0);
                    let max =
                        row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
                    let denom: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
                    let gs = g.get(0, 0);
                    let data = row.iter().map(|&v| gs * libm::exp(v - max) / denom).collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(1, row.len(), data)?)?;
                }
                Op::MeanRows(a) => {
                    let (l, d) = self.nodes[a.0].value.shape();
                    let mut ga = Matrix::zeros(l, d);
                    for r in 0..l {
                        for c in 0..d {
                            ga.set(r, c, g.get(0, c) / l as f64);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::PoolMean(items) => {
                    let share = g.scale(1.0 / items.len() as f64);
                    for &v in items.clone().iter() {
                        accumulate(&mut grads, v, share.clone())?;
                    }
                }
                Op::PoolMax(items) => {
                    let items = items.clone();
                    let (l, d) = g.shape();
                    let mut deltas = vec![Matrix::zeros(l, d); items.len()];
                    for r in 0..l {
                        for c in 0..d {
                            // first argmax wins the subgradient
                            let mut winner = 0;
                            let mut best = self.nodes[items[0].0].value.get(r, c);
                            for (i, &v) in items.iter().enumerate().skip(1) {
                                let val = self.nodes[v.0].value.get(r, c);
                                if val > best {
                                    best = val;
                                    winner = i;
                                }
                            }
                            deltas[winner].set(r, c, g.get(r, c));
                        }
                    }
                    for (&v, delta) in items.iter().zip(deltas) {
                        accumulate(&mut grads, v, delta)?;
                    }
                }
                Op::ColsSlice { x, start } => {
                    let (l, d) = self.nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(l, d);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ConcatCols(items) => {
                    let mut offset = 0;
                    for &v in items.clone().iter() {
                        let (l, d) = self.nodes[v.0].value.shape();
                        let mut gv = Matrix::zeros(l, d);
                        for r in 0..l {
                            for c in 0..d {
                                gv.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += d;
                        accumulate(&mut grads, v, gv)?;
                    }
                }
                Op::RowSlice { x, row } => {
                    let (l, d) = self.nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(l, d);
                    for c in 0..d {
                        gx.set(*row, c, g.get(0, c));
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::L2NormalizeRow(x) => {
                    let xv = &self.nodes[x.0].value;
                    let norm = libm::sqrt(xv.row(0).iter().map(|v| v * v).sum());
                    let y = &self.nodes[idx].value;
                    let dot: f64 =
                        g.row(0).iter().zip(y.row(0)).map(|(a, b)| a * b).sum();
                    let d = xv.cols();
                    let mut gx = Matrix::zeros(1, d);
                    for c in 0..d {
                        gx.set(0, c, (g.get(0, c) - y.get(0, c) * dot) / norm);
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::L2NormRow(x) => {
                    let xv = &self.nodes[x.0].value;
                    let norm = self.nodes[idx].value.get(0, 0);
                    let gs = g.get(0, 0);
                    let d = xv.cols();
                    let mut gx = Matrix::zeros(1, d);
                    if norm > 0.0 {
                        for c in 0..d {
                            gx.set(0, c, gs * xv.get(0, c) / norm);
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Dot(a, b) => {
                    let gs = g.get(0, 0);
                    let ga = self.nodes[b.0].value.scale(gs);
                    let gb = self.nodes[a.0].value.scale(gs);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::DotConst(a, weights) => {
                    let gs = g.get(0, 0);
                    let data = weights.iter().map(|w| gs * w).collect();
                    let ga = Matrix::from_vec(1, weights.len(), data)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::AddN(items) => {
                    for &v in items.clone().iter() {
                        accumulate(&mut grads, v, g.clone())?;
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (path, var) in &self.trainables {
            let shape = self.nodes[var.0].value.shape();
            let grad = grads[var.0].take().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            out.insert(path.clone(), grad);
        }
        Ok(out)
    }

    /// Loss value together with the gradients of all trainable leaves.
    pub fn loss_and_grads(mut self, loss: Var) -> Result<(f64, BTreeMap<String, Matrix>)> {
        let value = self.scalar_value(loss);
        let grads = self.backward(loss)?;
        Ok((value, grads))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, delta: Matrix) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

/// Compare the analytic gradient of `loss_fn` against central finite
/// differences over every trainable parameter entry.
///
/// `loss_fn` must deterministically map a parameter store to a scalar loss
/// and its analytic gradients (typically by recording a [`Tape`]). Returns
/// the worst relative error `|g_a - g_n| / (|g_a| + |g_n| + 1e-12)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Matrix>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let (base_loss, analytic) = loss_fn(params)?;
    if !base_loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let mut worst: f64 = 0.0;
    for path in params.trainable_paths() {
        let shape = params.get(&path)?.shape();
        let analytic_grad = analytic
            .get(&path)
            .ok_or_else(|| Error::NotFound(format!("analytic gradient for {path}")))?;
        for idx in 0..shape.0 * shape.1 {
            let mut plus = params.clone();
            plus.get_mut(&path)?.data_mut()[idx] += eps;
            let (loss_plus, _) = loss_fn(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(&path)?.data_mut()[idx] -= eps;
            let (loss_minus, _) = loss_fn(&minus)?;
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::Numeric("perturbed loss is not finite".into()));
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let ga = analytic_grad.data()[idx];
            let rel = libm::fabs(ga - numeric) / (libm::fabs(ga) + libm::fabs(numeric) + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn random_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        for (path, r, c) in shapes {
            let data = (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect();
            store
                .insert(path, Matrix::from_vec(*r, *c, data).unwrap(), true)
                .unwrap();
        }
        store
    }

    #[test]
    fn quadratic_gradient_is_almost_exact() {
        // loss = sum(theta^2) has analytic gradient 2*theta
        let params = random_store(&[("theta", 3, 4)], 11);
        let rel = grad_check(
            |p| {
                let mut tape = Tape::new();
                let t = tape.param("theta", p.get("theta").unwrap().clone(), true)?;
                let mut row_sums = Vec::new();
                for r in 0..3 {
                    let row = tape.row_slice(t, r)?;
                    row_sums.push(tape.dot(row, row)?);
                }
                let loss = tape.add_n(&row_sums)?;
                tape.loss_and_grads(loss)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-8, "relative error {rel}");
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut params = ParamStore::new();
        params
            .insert("frozen", Matrix::from_vec(1, 1, vec![3.0]).unwrap(), false)
            .unwrap();
        params
            .insert("live", Matrix::from_vec(1, 1, vec![2.0]).unwrap(), true)
            .unwrap();
        // loss depends on both, but only `live` is checked
        let rel = grad_check(
            |p| {
                let mut tape = Tape::new();
                let f = tape.param("frozen", p.get("frozen").unwrap().clone(), false)?;
                let l = tape.param("live", p.get("live").unwrap().clone(), true)?;
                let prod = tape.dot(f, l)?;
                tape.loss_and_grads(prod)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-9);
    }

    // One randomized grad check per differentiable op.
    fn check<F>(build: F, params: &ParamStore)
    where
        F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
    {
        let rel = grad_check(
            |p| {
                let mut tape = Tape::new();
                let loss = build(p, &mut tape)?;
                tape.loss_and_grads(loss)
            },
            params,
            1e-6,
        )
        .unwrap();
        assert!(rel <= 1e-5, "relative error {rel}");
    }

    // Reduce any matrix to a scalar through operations with known-good
    // gradients (row slicing + dot with a constant).
    fn to_scalar(tape: &mut Tape, v: Var) -> Result<Var> {
        let (rows, cols) = tape.value(v).shape();
        let weights: Vec<f64> = (0..cols).map(|c| 0.3 + 0.1 * c as f64).collect();
        let mut terms = Vec::new();
        for r in 0..rows {
            let row = tape.row_slice(v, r)?;
            terms.push(tape.dot_const(row, &weights)?);
        }
        tape.add_n(&terms)
    }

    #[test]
    fn grad_check_matmul_and_transpose() {
        let params = random_store(&[("a", 3, 4), ("b", 4, 2)], 5);
        check(
            |p, tape| {
                let a = tape.param("a", p.get("a").unwrap().clone(), true)?;
                let b = tape.param("b", p.get("b").unwrap().clone(), true)?;
                let bt = tape.transpose(b);
                let btt = tape.transpose(bt);
                let prod = tape.matmul(a, btt)?;
                to_scalar(tape, prod)
            },
            &params,
        );
    }

    #[test]
    fn grad_check_add_sub_scale_const() {
        let params = random_store(&[("a", 2, 3), ("b", 2, 3)], 6);
        check(
            |p, tape| {
                let a = tape.param("a", p.get("a").unwrap().clone(), true)?;
                let b = tape.param("b", p.get("b").unwrap().clone(), true)?;
                let s = tape.add(a, b)?;
                let d = tape.sub(s, b)?;
                let sc = tape.scale(d, 2.5);
                let ac = tape.add_const(sc, -0.7);
                to_scalar(tape, ac)
            },
            &params,
        );
    }

    #[test]
    fn grad_check_gelu_relu() {
        let params = random_store(&[("a", 3, 3)], 7);
        check(
            |p, tape| {
                let a = tape.param("a", p.get("a").unwrap().clone(), true)?;
                let g = tape.gelu(a);
                let r = tape.relu(g);
                to_scalar(tape, r)
            },
            &params,
        );
    }

    #[test]
    fn grad_check_layer_norm() {
        let params = random_store(&[("x", 4, 5), ("g", 1, 5), ("b", 1, 5)], 8);
        check(
            |p, tape| {
                let x = tape.param("x", p.get("x").unwrap().clone(), true)?;
                let g = tape.param("g", p.get("g").unwrap().clone(), true)?;
                let b = tape.param("b", p.get("b").unwrap().clone(), true)?;
                let ln = tape.layer_norm_rows(x, g, b, 1e-5)?;
                to_scalar(tape, ln)
            },
            &params,
        );
    }

    #[test]
    fn grad_check_softmax_logsumexp() {
        let params = random_store(&[("x", 3, 4), ("y", 1, 6)], 9);
        check(
            |p, tape| {
                let x = tape.param("x", p.get("x").unwrap().clone(), true)?;
                let y = tape.param("y", p.get("y").unwrap().clone(), true)?;
                let sm = tape.softmax_rows(x);
                let a = to_scalar(tape, sm)?;
                let lse = tape.log_sum_exp_row(y)?;
                tape.add(a, lse)
            },
            &params,
        );
    }

    #[test]
    fn grad_check_pooling_and_slices() {
        let params = random_store(&[("x", 4, 6)], 10);
        check(
            |p, tape| {
                let x = tape.param("x", p.get("x").unwrap().clone(), true)?;
                let r0 = tape.row_slice(x, 0)?;
                let r1 = tape.row_slice(x, 1)?;
                let r2 = tape.row_slice(x, 2)?;
                let mean = tape.pool_mean(&[r0, r1, r2])?;
                let max = tape.pool_max(&[r0, r1, r2])?;
                let left = tape.cols_slice(x, 0, 3)?;
                let right = tape.cols_slice(x, 3, 3)?;
                let cat = tape.concat_cols(&[left, right])?;
                let m = tape.mean_rows(cat);
                let s = tape.add(mean, max)?;
                let s2 = tape.add(s, m)?;
                to_scalar(tape, s2)
            },
            &params,
        );
    }

    #[test]
    fn grad_check_broadcast_norms_dot() {
        let params = random_store(&[("x", 3, 4), ("row", 1, 4), ("v", 1, 4)], 12);
        check(
            |p, tape| {
                let x = tape.param("x", p.get("x").unwrap().clone(), true)?;
                let row = tape.param("row", p.get("row").unwrap().clone(), true)?;
                let v = tape.param("v", p.get("v").unwrap().clone(), true)?;
                let b = tape.add_broadcast_row(x, row)?;
                let b2 = tape.add_row_at(b, 1, v)?;
                let s1 = to_scalar(tape, b2)?;
                let n = tape.l2_normalize_row(v)?;
                let vn = tape.l2_norm_row(v)?;
                let d = tape.dot(n, row)?;
                let s2 = tape.add(d, vn)?;
                tape.add(s1, s2)
            },
            &params,
        );
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_trainable_gets_zero_gradient() {
        let mut tape = Tape::new();
        let _unused = tape.param("unused", Matrix::zeros(2, 2), true).unwrap();
        let x = tape.param("x", Matrix::from_vec(1, 1, vec![3.0]).unwrap(), true).unwrap();
        let loss = tape.dot(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["unused"], Matrix::zeros(2, 2));
        assert_eq!(grads["x"].get(0, 0), 6.0);
    }
}
