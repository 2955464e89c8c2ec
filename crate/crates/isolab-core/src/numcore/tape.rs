//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value. [`Tape::backward`] then walks the nodes in reverse and
//! accumulates vector-Jacobian products. Leaves created with
//! [`Tape::leaf`] receive gradients, [`Tape::constant`] nodes do not; any
//! randomness (dropout masks) enters the graph as constants, so a recorded
//! pass is a deterministic function of its leaves.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    CenterCols(Var),
    ColMean(Var),
    Gelu(Var),
    Tanh(Var),
    Square(Var),
    Powf(Var, f64),
    Sqrt(Var),
    Sum(Var),
    Diag(Var),
    EmbedMean { table: Var, seqs: Vec<Vec<u32>> },
    RowNormalize(Var, f64),
    SoftmaxXent { logits: Var, labels: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Removes the gradient for `var`, returning zeros of `shape` when the
    /// node did not influence the loss.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Matrix {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise log-sum-exp, stable under large logits.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>())
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

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var)[(0, 0)]
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Differentiable input borrowed from the caller.
    pub fn leaf(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn leaf_owned(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push_owned(v, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_tn(self.value(b))?;
        Ok(self.push_owned(v, Op::MatMulTn(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_owned(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push_owned(v, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_owned(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push_owned(v, Op::Scale(a, factor), &[a])
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a).map(|x| x + offset);
        self.push_owned(v, Op::Shift(a), &[a])
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).broadcast_row(self.value(row), |x, r| x + r)?;
        Ok(self.push_owned(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` element-wise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).broadcast_row(self.value(row), |x, r| x * r)?;
        Ok(self.push_owned(v, Op::MulRow(a, row), &[a, row]))
    }

    /// Subtracts the column means.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let means = x.col_means();
        let v = x
            .broadcast_row(&means, |x, m| x - m)
            .expect("column means have matching width");
        self.push_owned(v, Op::CenterCols(a), &[a])
    }

    /// Column means as a `1 × cols` row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self.value(a).col_means();
        self.push_owned(v, Op::ColMean(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push_owned(v, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        self.push_owned(v, Op::Tanh(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push_owned(v, Op::Square(a), &[a])
    }

    /// Element-wise power; entries must be positive for non-integer exponents.
    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        let v = self.value(a).map(|x| libm::pow(x, exponent));
        self.push_owned(v, Op::Powf(a, exponent), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::sqrt);
        self.push_owned(v, Op::Sqrt(a), &[a])
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push_owned(v, Op::Sum(a), &[a])
    }

    /// Diagonal of a square matrix as a `1 × n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(Error::DimensionMismatch {
                op: "diag",
                left: x.shape(),
                right: (x.cols(), x.rows()),
            });
        }
        let d = x.diagonal();
        let v = Matrix::from_vec(1, d.len(), d)?;
        Ok(self.push_owned(v, Op::Diag(a), &[a]))
    }

    /// Mean of embedding-table rows for each token sequence.
    ///
    /// Every sequence must be non-empty and every id a valid row of `table`.
    pub fn embed_mean(&mut self, table: Var, seqs: &[Vec<u32>]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Matrix::zeros(seqs.len(), t.cols());
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::contract("embed_mean: empty token sequence"));
            }
            let inv = 1.0 / seq.len() as f64;
            let row = out.row_mut(i);
            for &tok in seq {
                let tok = tok as usize;
                if tok >= t.rows() {
                    return Err(Error::contract(alloc::format!(
                        "token id {tok} outside table of {} rows",
                        t.rows()
                    )));
                }
                for (o, &e) in row.iter_mut().zip(t.row(tok)) {
                    *o += e * inv;
                }
            }
        }
        Ok(self.push_owned(
            out,
            Op::EmbedMean {
                table,
                seqs: seqs.to_vec(),
            },
            &[table],
        ))
    }

    /// Scales each row to unit Euclidean norm: `x / (‖x‖ + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            let inv = 1.0 / (norm + eps);
            row.iter_mut().for_each(|x| *x *= inv);
        }
        self.push_owned(v, Op::RowNormalize(a, eps), &[a])
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() || z.rows() == 0 {
            return Err(Error::DimensionMismatch {
                op: "softmax_cross_entropy",
                left: z.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= z.cols() {
                return Err(Error::contract(alloc::format!(
                    "label {y} outside {} classes",
                    z.cols()
                )));
            }
            let row = z.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let v = Matrix::scalar(total / labels.len() as f64);
        Ok(self.push_owned(
            v,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or_else(|| {
            Error::Usage("backward called on a node that was never recorded".into())
        })?;
        if node.value.shape() != (1, 1) {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(self.value(*b))?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(self.value(*a))?;
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulTn(a, b) => {
                    if self.needs(*a) {
                        let ga = self.value(*b).matmul_nt(&g)?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul(&g)?;
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.hadamard(self.value(*b))?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.hadamard(self.value(*a))?;
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, factor) => self.accumulate(&mut grads, *a, g.scale(*factor)),
                Op::Shift(a) => self.accumulate(&mut grads, *a, g),
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        self.accumulate(&mut grads, *row, g.col_sums());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    if self.needs(*row) {
                        let gr = g.hadamard(self.value(*a))?.col_sums();
                        self.accumulate(&mut grads, *row, gr);
                    }
                    if self.needs(*a) {
                        let ga = g.broadcast_row(self.value(*row), |x, r| x * r)?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                }
                Op::CenterCols(a) => {
                    let means = g.col_means();
                    let ga = g.broadcast_row(&means, |x, m| x - m)?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ColMean(a) => {
                    let x = self.value(*a);
                    let inv = 1.0 / x.rows() as f64;
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |_, c| g[(0, c)] * inv);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_with("gelu", self.value(*a), |g, x| g * gelu_grad(x))?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_with("tanh", &node.value, |g, y| g * (1.0 - y * y))?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_with("square", self.value(*a), |g, x| 2.0 * g * x)?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let ga =
                        g.zip_with("powf", self.value(*a), |g, x| g * p * libm::pow(x, p - 1.0))?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_with("sqrt", &node.value, |g, y| g / (2.0 * y))?;
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    self.accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::Diag(a) => {
                    let n = g.cols();
                    let mut ga = Matrix::zeros(n, n);
                    for i in 0..n {
                        ga[(i, i)] = g[(0, i)];
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::EmbedMean { table, seqs } => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(rows, cols);
                    for (i, seq) in seqs.iter().enumerate() {
                        let inv = 1.0 / seq.len() as f64;
                        let gi = g.row(i);
                        for &tok in seq {
                            for (o, &v) in gt.row_mut(tok as usize).iter_mut().zip(gi) {
                                *o += v * inv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *table, gt);
                }
                Op::RowNormalize(a, eps) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let norm = libm::sqrt(xr.iter().map(|v| v * v).sum::<f64>());
                        let denom = norm + eps;
                        let out = ga.row_mut(r);
                        if norm > 0.0 {
                            let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let k = xg / (norm * denom * denom);
                            for ((o, &gv), &xv) in out.iter_mut().zip(gr).zip(xr) {
                                *o = gv / denom - xv * k;
                            }
                        } else {
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o = gv / denom;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxXent { logits, labels } => {
                    let z = self.value(*logits);
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let mut gz = Matrix::zeros(z.rows(), z.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        let row = z.row(i);
                        let lse = log_sum_exp(row);
                        for (o, &v) in gz.row_mut(i).iter_mut().zip(row) {
                            *o = libm::exp(v - lse) * scale;
                        }
                        gz[(i, y)] -= scale;
                    }
                    self.accumulate(&mut grads, *logits, gz);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing
                .axpy(1.0, &g)
                .expect("gradient shape matches its node"),
            slot @ None => *slot = Some(g),
        }
    }
}
