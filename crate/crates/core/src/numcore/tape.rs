//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Node ids grow
//! monotonically, so construction order is a topological order and
//! [`Tape::backward`] simply walks the nodes in reverse.

use std::rc::Rc;

use super::sum::stable_mean;
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds. Inputs always precede the node that uses them.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mean(Var),
    MeanRows(Var),
    SqDist(Var, Var),
    NormalizeRows(Var, f64),
    CrossEntropy(Var, Rc<Vec<usize>>),
    CrossEntropyLogits(Var, Rc<Vec<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not reach
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(op, format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::dim(op, format!("expected a 2-D tensor, got shape {:?}", t.shape())))
    }
}

fn softmax_row(src: &[f64], mask: Option<&[bool]>, dst: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in src.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        dst.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
        *d = if allowed(j) { (v - max).exp() } else { 0.0 };
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn softmax_backward_row(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &yj), &gj) in dx.iter_mut().zip(y).zip(g) {
        *d += yj * (gj - dot);
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A trainable leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul(ta, tb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    /// Element-wise sum of same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Adds the `[1,m]` row `b` to every row of the `[n,m]` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("add_row", ta)?;
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let m = ta.cols();
        let bias = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + bias[i % m]).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddRow(a, b), rg, "add_row")
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("elementwise_mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "elementwise_mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::Numeric { op: "scale" });
        }
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("softmax_rows", ta)?;
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            softmax_row(ta.row(r), None, &mut data[r * m..(r + 1) * m]);
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg, "softmax_rows")
    }

    /// Row softmax restricted to entries where `mask` (row-major, same shape)
    /// is true. Rows without any allowed entry become all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("masked_softmax_rows", ta)?;
        let (n, m) = (ta.rows(), ta.cols());
        if mask.len() != n * m {
            return Err(Error::dim(
                "masked_softmax_rows",
                format!("mask has {} entries for shape {:?}", mask.len(), ta.shape()),
            ));
        }
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            softmax_row(ta.row(r), Some(&mask[r * m..(r + 1) * m]), &mut data[r * m..(r + 1) * m]);
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MaskedSoftmaxRows(a), rg, "masked_softmax_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != n {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows", "no inputs"));
        };
        let m = self.value(first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_rows", t)?;
            if t.cols() != m {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            n += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let out = Tensor::scalar(stable_mean(ta.data()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Column-wise mean over rows: `[n,m] -> [1,m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("mean_rows", ta)?;
        if ta.rows() == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let (n, m) = (ta.rows(), ta.cols());
        let mut col = vec![0.0; n];
        let data = (0..m)
            .map(|c| {
                for (r, v) in col.iter_mut().enumerate() {
                    *v = ta.get(r, c);
                }
                stable_mean(&col)
            })
            .collect();
        let out = Tensor::matrix(1, m, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg, "mean_rows")
    }

    /// Pairwise squared Euclidean distances between rows: `[n,d],[m,d] -> [n,m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("sq_dist", ta)?;
        require_matrix("sq_dist", tb)?;
        if ta.cols() != tb.cols() {
            return Err(shape_err("sq_dist", ta, tb));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::SqDist(a, b), rg, "sq_dist")
    }

    /// Divides every row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("normalize_rows", ta)?;
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = ta.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            data.extend(row.iter().map(|x| x / norm));
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows(a, eps), rg, "normalize_rows")
    }

    /// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        Self::check_labels("cross_entropy", tp, labels)?;
        for r in 0..tp.rows() {
            let s: f64 = tp.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 || tp.row(r).iter().any(|&p| p < 0.0) {
                return Err(Error::contract(format!(
                    "cross_entropy expects probability rows, row {} sums to {}",
                    r, s
                )));
            }
        }
        let nll: Vec<f64> = labels.iter().enumerate().map(|(r, &y)| -tp.get(r, y).ln()).collect();
        let out = Tensor::scalar(stable_mean(&nll));
        let rg = self.rg(&[probs]);
        self.push(out, Op::CrossEntropy(probs, Rc::new(labels.to_vec())), rg, "cross_entropy")
    }

    /// Fused `cross_entropy(softmax_rows(logits), labels)` evaluated through
    /// log-sum-exp, finite even when a probability underflows.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        Self::check_labels("cross_entropy_logits", tl, labels)?;
        let nll: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = tl.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .collect();
        let out = Tensor::scalar(stable_mean(&nll));
        let rg = self.rg(&[logits]);
        self.push(out, Op::CrossEntropyLogits(logits, Rc::new(labels.to_vec())), rg, "cross_entropy_logits")
    }

    fn check_labels(op: &'static str, t: &Tensor, labels: &[usize]) -> Result<()> {
        require_matrix(op, t)?;
        if t.rows() != labels.len() {
            return Err(Error::dim(op, format!("{} rows but {} labels", t.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::contract(format!("{op} over an empty batch")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= t.cols()) {
            return Err(Error::dim(op, format!("label {} out of range for {} classes", bad, t.cols())));
        }
        Ok(())
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let keep = matches!(node.op, Op::Leaf);
            self.propagate(node, &g, &mut grads);
            if keep {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |v: Var, d: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, matmul_nt(g, tb), grads);
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn(ta, g), grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone(), grads);
                if self.requires_grad(*b) {
                    let m = g.cols();
                    let mut db = vec![0.0; m];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db).expect("bias shape"), grads);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mk = |other: &Tensor| {
                    let d = g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), d).expect("same shape")
                };
                if self.requires_grad(*a) {
                    acc(*a, mk(tb), grads);
                }
                if self.requires_grad(*b) {
                    acc(*b, mk(ta), grads);
                }
            }
            Op::Scale(a, f) => {
                let d = g.data().iter().map(|x| x * f).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("same shape"), grads);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("same shape"), grads);
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let (n, m) = (y.rows(), y.cols());
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    softmax_backward_row(y.row(r), g.row(r), &mut dx[r * m..(r + 1) * m]);
                }
                acc(*a, Tensor::matrix(n, m, dx).expect("shape"), grads);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, Tensor::matrix(n, w, d).expect("shape"), grads);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.requires_grad(p) {
                        let d = g.data()[offset * m..(offset + h) * m].to_vec();
                        acc(p, Tensor::matrix(h, m, d).expect("shape"), grads);
                    }
                    offset += h;
                }
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.item() / ta.numel() as f64;
                acc(*a, Tensor::full(ta.shape(), v), grads);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.rows();
                let row: Vec<f64> = g.data().iter().map(|v| v / n as f64).collect();
                let d = (0..n).flat_map(|_| row.iter().copied()).collect();
                acc(*a, Tensor::matrix(n, ta.cols(), d).expect("shape"), grads);
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, dim) = (ta.rows(), tb.rows(), ta.cols());
                let mut da = vec![0.0; n * dim];
                let mut db = vec![0.0; m * dim];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..dim {
                            let diff = 2.0 * gij * (ta.get(i, k) - tb.get(j, k));
                            da[i * dim + k] += diff;
                            db[j * dim + k] -= diff;
                        }
                    }
                }
                if self.requires_grad(*a) {
                    acc(*a, Tensor::matrix(n, dim, da).expect("shape"), grads);
                }
                if self.requires_grad(*b) {
                    acc(*b, Tensor::matrix(m, dim, db).expect("shape"), grads);
                }
            }
            Op::NormalizeRows(a, eps) => {
                let ta = self.value(*a);
                let (n, m) = (ta.rows(), ta.cols());
                let mut dx = Vec::with_capacity(n * m);
                for r in 0..n {
                    let norm = ta.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    if norm > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|gv| gv / eps));
                    }
                }
                acc(*a, Tensor::matrix(n, m, dx).expect("shape"), grads);
            }
            Op::CrossEntropy(p, labels) => {
                let tp = self.value(*p);
                let n = labels.len() as f64;
                let mut d = Tensor::zeros(tp.shape());
                let cols = tp.cols();
                for (r, &lab) in labels.iter().enumerate() {
                    d.data_mut()[r * cols + lab] = -g.item() / (n * tp.get(r, lab));
                }
                acc(*p, d, grads);
            }
            Op::CrossEntropyLogits(z, labels) => {
                let tz = self.value(*z);
                let (rows, cols) = (tz.rows(), tz.cols());
                let n = labels.len() as f64;
                let mut d = vec![0.0; rows * cols];
                for (r, &lab) in labels.iter().enumerate() {
                    softmax_row(tz.row(r), None, &mut d[r * cols..(r + 1) * cols]);
                    d[r * cols + lab] -= 1.0;
                    for v in &mut d[r * cols..(r + 1) * cols] {
                        *v *= g.item() / n;
                    }
                }
                acc(*z, Tensor::matrix(rows, cols, d).expect("shape"), grads);
            }
        }
    }
}

/// Result of [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Floor of the denominator in the relative-error measure, so that entries
/// whose true gradient is zero are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares tape gradients with central finite differences.
///
/// `build` receives the inputs registered as parameters and returns a scalar
/// loss. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub fn gradient_check<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, entries: 0 };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.max_rel_err = report.max_rel_err.max((a - numeric).abs() / denom);
            report.entries += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1., 2., 3., 4.])).unwrap();
        let i = t.constant(Tensor::identity(2)).unwrap();
        let out = t.matmul(a, i).unwrap();
        assert_eq!(t.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(m(1, 3, &[0., 0., 0.])).unwrap();
        let s = t.softmax_rows(a).unwrap();
        for &p in t.value(s).data() {
            assert_eq!(p, 1.0 / 3.0);
        }
    }

    #[test]
    fn cross_entropy_matches_scalar_evaluation() {
        let mut t = Tape::new();
        let a = t.constant(m(1, 3, &[2., 1., 0.])).unwrap();
        let s = t.softmax_rows(a).unwrap();
        let ce = t.cross_entropy(s, &[0]).unwrap();
        let z = 2f64.exp() + 1f64.exp() + 1.0;
        let expected = -(2f64.exp() / z).ln();
        assert!((t.value(ce).item() - expected).abs() < 1e-14);

        let fused = t.cross_entropy_logits(a, &[0]).unwrap();
        assert!((t.value(fused).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 3, &[0.; 6])).unwrap();
        let b = t.constant(m(2, 3, &[0.; 6])).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(m(1, 2, &[1.0, f64::NAN])),
            Err(Error::Numeric { .. })
        ));
        let a = t.constant(m(1, 1, &[1e300])).unwrap();
        assert!(matches!(t.scale(a, 1e300), Err(Error::Numeric { .. })));
    }

    #[test]
    fn cross_entropy_rejects_unnormalised_rows() {
        let mut t = Tape::new();
        let a = t.constant(m(1, 2, &[0.5, 0.6])).unwrap();
        assert!(matches!(t.cross_entropy(a, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let a = t.param(m(1, 2, &[1., 2.])).unwrap();
        let r = t.relu(a).unwrap();
        assert!(matches!(t.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(W x) with x fixed: dW[i][j] = x[i]
        let mut t = Tape::new();
        let x = t.constant(m(1, 3, &[1., -2., 0.5])).unwrap();
        let w = t.param(m(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])).unwrap();
        let y = t.matmul(x, w).unwrap();
        let mean = t.mean(y).unwrap();
        let sum = t.scale(mean, 2.0).unwrap();
        let g = t.backward(sum).unwrap();
        let gw = g.get(w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((gw.get(i, j) - [1., -2., 0.5][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut t = Tape::new();
        let c = t.param(Tensor::scalar(3.0)).unwrap();
        let neg = t.constant(Tensor::scalar(-1.0)).unwrap();
        let r = t.relu(neg).unwrap();
        let loss = t.elementwise_mul(r, c).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(c).unwrap().item(), 0.0);
    }

    #[test]
    fn masked_rows_without_neighbors_are_zero() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1., 2., 3., 4.])).unwrap();
        let s = t.masked_softmax_rows(a, Rc::new(vec![false, false, true, false])).unwrap();
        assert_eq!(t.value(s).data(), &[0., 0., 1., 0.]);
    }
}
