//! Reverse-mode differentiation over a fixed operator set.
//!
//! Every operation appends one node to the [`Tape`]. [`Tape::backward`]
//! walks the nodes in reverse insertion order, so each node's gradient is
//! complete (summed over all consumers) before it is propagated to its
//! inputs.

use std::sync::Arc;

use super::matrix::{dot, CsrMatrix, Matrix};
use super::EngineError;

/// Floor applied to row norms in cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Var, Var),
    CosineSim(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Diag(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        weight_sum: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
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

    /// Records a trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1×1 tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Smallest distance from any relu or clamp input to a point where that
    /// op is not differentiable; `f64::INFINITY` when the tape has neither.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let kinks: &[f64] = match &node.op {
                Op::Relu(_) => &[0.0],
                Op::Clamp(_, lo, hi) => &[*lo, *hi],
                _ => continue,
            };
            let input = match node.op {
                Op::Relu(a) | Op::Clamp(a, _, _) => self.value(a),
                _ => unreachable!(),
            };
            for &x in input.as_slice() {
                for &k in kinks {
                    margin = margin.min((x - k).abs());
                }
            }
        }
        margin
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op) -> Result<Var, EngineError> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::ConcatCols(a, b)
            | Op::CosineSim(a, b) => vec![a, b],
            Op::SpMM(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Diag(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(EngineError::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn spmm(&mut self, sparse: Arc<CsrMatrix>, b: Var) -> Result<Var, EngineError> {
        let out = sparse.spmm(self.value(b))?;
        self.push("spmm", out, Op::SpMM(sparse, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.same_shape("elementwise_mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("elementwise_mul", out, Op::Mul(a, b))
    }

    /// Adds a 1×c bias row to every row of an n×c tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(EngineError::Dimension {
                op: "add_bias",
                left: sa,
                right: sb,
            });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for i in 0..sa.0 {
            for (o, bj) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bj;
            }
        }
        self.push("add_bias", out, Op::AddRowBroadcast(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, EngineError> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, EngineError> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, EngineError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, EngineError> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, EngineError> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    /// Natural log; non-positive inputs produce a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var, EngineError> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, EngineError> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(EngineError::Dimension {
                op: "concat_cols",
                left: sa,
                right: sb,
            });
        }
        let mut out = Matrix::zeros(sa.0, sa.1 + sb.1);
        for i in 0..sa.0 {
            let row = out.row_mut(i);
            row[..sa.1].copy_from_slice(self.nodes[a.0].value.row(i));
            row[sa.1..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        self.push("concat_cols", out, Op::ConcatCols(a, b))
    }

    /// `out[i][j] = <a_i, b_j> / (‖a_i‖ ‖b_j‖)` with norms floored at
    /// [`COSINE_NORM_FLOOR`].
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(EngineError::Dimension {
                op: "row_cosine_sim_matrix",
                left: sa,
                right: sb,
            });
        }
        let out = unit_rows(self.value(a)).0.matmul_t(&unit_rows(self.value(b)).0)?;
        self.push("row_cosine_sim_matrix", out, Op::CosineSim(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        let out = softmax_rows(self.value(a));
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax in max-shifted form.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, EngineError> {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a))
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, a: Var) -> Result<Var, EngineError> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(EngineError::Dimension {
                op: "diag",
                left: (r, c),
                right: (c, r),
            });
        }
        let x = self.value(a);
        let out = Matrix::column(&(0..r).map(|i| x[(i, i)]).collect::<Vec<_>>());
        self.push("diag", out, Op::Diag(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, EngineError> {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, EngineError> {
        let x = self.value(a);
        let count = (x.rows() * x.cols()).max(1) as f64;
        let out = Matrix::filled(1, 1, x.sum() / count);
        self.push("reduce_mean", out, Op::Mean(a))
    }

    /// Weighted mean binary cross-entropy of n×1 logits against 0/1 targets,
    /// in the stable form `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var, EngineError> {
        let shape = self.shape(logits);
        if shape.1 != 1 || targets.len() != shape.0 || weights.len() != shape.0 {
            return Err(EngineError::Dimension {
                op: "bce_with_logits",
                left: shape,
                right: (targets.len(), weights.len()),
            });
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(EngineError::EmptySelection { op: "bce_with_logits" });
        }
        let x = self.value(logits).as_slice();
        let total: f64 = x
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &y), &w)| w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
            .sum();
        let out = Matrix::filled(1, 1, total / weight_sum);
        self.push(
            "bce_with_logits",
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                weight_sum,
            },
        )
    }

    /// Populates gradients of `loss` with respect to every tensor on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        if self.backward_done {
            return Err(EngineError::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(EngineError::State(format!(
                "tensor {} is not recorded on this tape",
                loss.0
            )));
        }
        if self.shape(loss) != (1, 1) {
            return Err(EngineError::Dimension {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) -> Result<(), EngineError> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let ga = g.matmul_t(self.value(b))?;
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let gb = self.value(a).t_matmul(g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::SpMM(s, b) => {
                let gb = s.t_spmm(g)?;
                self.accumulate(b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = g.zip_map(self.value(b), |x, y| x * y);
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let gb = g.zip_map(self.value(a), |x, y| x * y);
                    self.accumulate(b, gb);
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                self.accumulate(a, g.clone());
                if self.wants(bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(bias, gb);
                }
            }
            Op::Scale(a, f) => self.accumulate(a, g.map(|x| x * f)),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::Tanh(_) | Op::Exp(_) | Op::SoftmaxRows(_) | Op::LogSoftmaxRows(_) => {
                self.propagate_from_output(idx, &op, g);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(a), |gv, x| gv / x);
                self.accumulate(a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(a), |gv, x| if (lo..=hi).contains(&x) { gv } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                let cb = self.shape(b).1;
                let mut ga = Matrix::zeros(g.rows(), ca);
                let mut gb = Matrix::zeros(g.rows(), cb);
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::CosineSim(a, b) => {
                let (ga, gb) = cosine_backward(self.value(a), self.value(b), g)?;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Diag(a) => {
                let n = g.rows();
                let mut ga = Matrix::zeros(n, n);
                for i in 0..n {
                    ga[(i, i)] = g.as_slice()[i];
                }
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                let count = (r * c).max(1) as f64;
                self.accumulate(a, Matrix::filled(r, c, g.as_slice()[0] / count));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                weight_sum,
            } => {
                let upstream = g.as_slice()[0];
                let x = self.value(logits).as_slice();
                let grad: Vec<f64> = x
                    .iter()
                    .zip(&targets)
                    .zip(&weights)
                    .map(|((&x, &y), &w)| upstream * w * (sigmoid(x) - y) / weight_sum)
                    .collect();
                self.accumulate(logits, Matrix::column(&grad));
            }
        }
        Ok(())
    }

    /// Ops whose derivative is most naturally written in terms of their output.
    fn propagate_from_output(&mut self, idx: usize, op: &Op, g: &Matrix) {
        let y = &self.nodes[idx].value;
        let (a, ga) = match *op {
            Op::Tanh(a) => (a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Exp(a) => (a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner = dot(g.row(i), y.row(i));
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yv * (gv - inner);
                    }
                }
                (a, ga)
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                (a, ga)
            }
            _ => unreachable!("not an output-derivative op"),
        };
        self.accumulate(a, ga);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), m.row(i)).sqrt()).collect()
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Rows scaled to unit length (norms floored), plus the unfloored norms.
fn unit_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let norms = row_norms(m);
    let mut unit = m.clone();
    for (i, &n) in norms.iter().enumerate() {
        let inv = 1.0 / n.max(COSINE_NORM_FLOOR);
        unit.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    (unit, norms)
}

/// Pulls a gradient w.r.t. unit rows back through the row normalization.
/// Floored norms are constant, so they contribute no projection term.
fn unnormalize_grad(mut g: Matrix, unit: &Matrix, norms: &[f64]) -> Matrix {
    for (i, &n) in norms.iter().enumerate() {
        let u = unit.row(i);
        let row = g.row_mut(i);
        if n > COSINE_NORM_FLOOR {
            let along = dot(row, u);
            for (o, &x) in row.iter_mut().zip(u) {
                *o = (*o - along * x) / n;
            }
        } else {
            row.iter_mut().for_each(|o| *o /= COSINE_NORM_FLOOR);
        }
    }
    g
}

fn cosine_backward(a: &Matrix, b: &Matrix, g: &Matrix) -> Result<(Matrix, Matrix), EngineError> {
    let (ua, na) = unit_rows(a);
    let (ub, nb) = unit_rows(b);
    let ga = g.matmul(&ub)?;
    let gb = g.t_matmul(&ua)?;
    Ok((unnormalize_grad(ga, &ua, &na), unnormalize_grad(gb, &ub, &nb)))
}
