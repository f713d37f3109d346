//! Define-by-run reverse-mode autodiff on a flat tape.
//!
//! A `Tape` is rebuilt for every training step: ops append nodes, values are
//! computed eagerly, and `backward` walks the node list in reverse
//! accumulating gradients. Handles are plain indices (`Var`); a handle is only
//! meaningful on the tape that produced it.
//!
//! The op set is deliberately small. Losses with tricky numerics (softmax
//! cross-entropy, BCE with logits) are fused nodes with log-sum-exp
//! stabilized forwards and hand-derived backwards, so downstream code never
//! exponentiates raw logits.

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    /// Scale a matrix by a 1x1 node.
    ScaleBy { x: Var, s: Var },
    /// Add a 1 x c row vector to every row of a r x c matrix.
    AddRowBroadcast { x: Var, row: Var },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, lo: usize, hi: usize },
    ReduceMean(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    StopGradient,
    SoftmaxXent { logits: Var, labels: Vec<usize> },
    BceLogits { logits: Var, targets: Var },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no path carried one.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::with_capacity(64),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Matrix, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Trainable input; receives a gradient slot.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input; gradients never reach it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(value, Op::Matmul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(value, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(value, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(value, Op::Mul(a, b), ng, "mul")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        let ng = self.needs_grad(a);
        self.push_checked(value, Op::MulScalar(a, s), ng, "mul_scalar")
    }

    /// Multiply every entry of `x` by the 1x1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(CoreError::ShapeMismatch {
                op: "scale_by",
                detail: format!("scale must be 1x1, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s)[(0, 0)];
        let value = self.value(x).scale(sv);
        let ng = self.needs_grad(x) || self.needs_grad(s);
        self.push_checked(value, Op::ScaleBy { x, s }, ng, "scale_by")
    }

    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xr, xc) = self.value(x).shape();
        if self.value(row).shape() != (1, xc) {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("row is {:?}, matrix is {}x{}", self.value(row).shape(), xr, xc),
            });
        }
        let row_v = self.value(row).row(0).to_vec();
        let value = {
            let xv = self.value(x);
            Matrix::from_fn(xr, xc, |i, j| xv[(i, j)] + row_v[j])
        };
        let ng = self.needs_grad(x) || self.needs_grad(row);
        self.push_checked(value, Op::AddRowBroadcast { x, row }, ng, "add_row_broadcast")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Relu(x), ng, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(stable_sigmoid);
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Sigmoid(x), ng, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Exp(x), ng, "exp")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::sqrt);
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Sqrt(x), ng, "sqrt")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::recip);
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Recip(x), ng, "recip")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Square(x), ng, "square")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(CoreError::InvalidConfig(format!("clamp bounds [{lo}, {hi}]")));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Clamp { x, lo, hi }, ng, "clamp")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose();
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::Transpose(x), ng, "transpose")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push_checked(value, Op::ConcatCols(a, b), ng, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(lo, hi)?;
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::SliceCols { x, lo, hi }, ng, "slice_cols")
    }

    /// Mean of all entries as a 1x1 node.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = (xv.rows() * xv.cols()) as f64;
        if n == 0.0 {
            return Err(CoreError::ShapeMismatch {
                op: "reduce_mean",
                detail: "empty matrix".into(),
            });
        }
        let value = Matrix::from_vec(1, 1, vec![xv.sum() / n])?;
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::ReduceMean(x), ng, "reduce_mean")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(idx)?;
        let ng = self.needs_grad(x);
        self.push_checked(value, Op::GatherRows { x, idx: idx.to_vec() }, ng, "gather_rows")
    }

    /// Identity in the forward pass; blocks all gradient flow in the backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Mean softmax cross-entropy over rows of `logits` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, n) = lv.shape();
        if labels.len() != b {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), b),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of {n} classes"),
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total += row_log_sum_exp(lv.row(i)) - lv[(i, y)];
        }
        let value = Matrix::from_vec(1, 1, vec![total / b as f64])?;
        let ng = self.needs_grad(logits);
        self.push_checked(
            value,
            Op::SoftmaxXent { logits, labels: labels.to_vec() },
            ng,
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy with logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let lv = self.value(logits);
        let tv = self.value(targets);
        if lv.shape() != tv.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("logits {:?} vs targets {:?}", lv.shape(), tv.shape()),
            });
        }
        let mut total = 0.0;
        for (z, t) in lv.data().iter().zip(tv.data()) {
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let n = (lv.rows() * lv.cols()) as f64;
        let value = Matrix::from_vec(1, 1, vec![total / n])?;
        let ng = self.needs_grad(logits);
        self.push_checked(value, Op::BceLogits { logits, targets }, ng, "bce_with_logits")
    }

    /// Column means of `x` as a 1 x c node (composed from primitives).
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let b = self.value(x).rows();
        if b == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "col_mean",
                detail: "empty matrix".into(),
            });
        }
        let ones = self.constant(Matrix::filled(1, b, 1.0 / b as f64));
        self.matmul(ones, x)
    }

    /// Subtract per-column batch means from every row.
    pub fn center_cols(&mut self, x: Var) -> Result<Var> {
        let mu = self.col_mean(x)?;
        let neg = self.mul_scalar(mu, -1.0)?;
        self.add_row_broadcast(x, neg)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let n = {
            let v = self.value(x);
            (v.rows() * v.cols()) as f64
        };
        let mean = self.reduce_mean(x)?;
        self.mul_scalar(mean, n)
    }

    /// Accumulates d(loss)/d(node) for every node that needs a gradient.
    ///
    /// Consumes the graph: a second call fails with `GraphConsumed`. Values
    /// remain readable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(CoreError::GraphConsumed);
        }
        self.consumed = true;
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(CoreError::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant | Op::StopGradient => Ok(()),
            Op::Matmul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bt = self.value(*b).transpose();
                    self.accumulate(grads, *a, g.matmul(&bt)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    let at = self.value(*a).transpose();
                    self.accumulate(grads, *b, at.matmul(g)?)?;
                }
                Ok(())
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
                Ok(())
            }
            Op::MulScalar(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s)[(0, 0)];
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, g.scale(sv))?;
                }
                if self.nodes[s.0].needs_grad {
                    let dot = g.hadamard(self.value(*x))?.sum();
                    self.accumulate(grads, *s, Matrix::filled(1, 1, dot))?;
                }
                Ok(())
            }
            Op::AddRowBroadcast { x, row } => {
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, g.clone())?;
                }
                if self.nodes[row.0].needs_grad {
                    let mut sums = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            sums.set(0, c, sums[(0, c)] + g[(r, c)]);
                        }
                    }
                    self.accumulate(grads, *row, sums)?;
                }
                Ok(())
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let delta = g.zip_map(xv, "relu_back", |gv, v| if v > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, delta)
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[i].value;
                let delta = g.zip_map(out, "sigmoid_back", |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *x, delta)
            }
            Op::Exp(x) => {
                let out = &self.nodes[i].value;
                self.accumulate(grads, *x, g.hadamard(out)?)
            }
            Op::Sqrt(x) => {
                let out = &self.nodes[i].value;
                let delta = g.zip_map(out, "sqrt_back", |gv, s| gv * 0.5 / s)?;
                delta.check_finite("sqrt_back")?;
                self.accumulate(grads, *x, delta)
            }
            Op::Recip(x) => {
                let out = &self.nodes[i].value;
                let delta = g.zip_map(out, "recip_back", |gv, r| -gv * r * r)?;
                self.accumulate(grads, *x, delta)
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let delta = g.zip_map(xv, "square_back", |gv, v| 2.0 * gv * v)?;
                self.accumulate(grads, *x, delta)
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let (lo, hi) = (*lo, *hi);
                let delta = g.zip_map(xv, "clamp_back", |gv, v| {
                    if v >= lo && v <= hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *x, delta)
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.slice_cols(0, ac)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.slice_cols(ac, g.cols())?)?;
                }
                Ok(())
            }
            Op::SliceCols { x, lo, hi } => {
                debug_assert_eq!(hi - lo, g.cols());
                let xv = self.value(*x);
                let mut delta = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        delta.set(r, lo + c, g[(r, c)]);
                    }
                }
                self.accumulate(grads, *x, delta)
            }
            Op::ReduceMean(x) => {
                let xv = self.value(*x);
                let scale = g[(0, 0)] / (xv.rows() * xv.cols()) as f64;
                self.accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), scale))
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut delta = Matrix::zeros(xv.rows(), xv.cols());
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for c in 0..g.cols() {
                        delta.set(src_r, c, delta[(src_r, c)] + g[(out_r, c)]);
                    }
                }
                self.accumulate(grads, *x, delta)
            }
            Op::SoftmaxXent { logits, labels } => {
                let lv = self.value(*logits);
                let (b, n) = lv.shape();
                let scale = g[(0, 0)] / b as f64;
                let mut delta = Matrix::zeros(b, n);
                for (r, &y) in labels.iter().enumerate() {
                    let lse = row_log_sum_exp(lv.row(r));
                    for c in 0..n {
                        let p = (lv[(r, c)] - lse).exp();
                        let ind = if c == y { 1.0 } else { 0.0 };
                        delta.set(r, c, scale * (p - ind));
                    }
                }
                self.accumulate(grads, *logits, delta)
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let tv = self.value(*targets);
                let scale = g[(0, 0)] / (lv.rows() * lv.cols()) as f64;
                let delta = lv.zip_map(tv, "bce_back", |z, t| scale * (stable_sigmoid(z) - t))?;
                self.accumulate(grads, *logits, delta)
            }
        }
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn row_log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}
