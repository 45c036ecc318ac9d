use std::borrow::Cow;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    MeanPoolHw(Var),
    CellsToImage {
        x: Var,
        grid: usize,
        cells: usize,
        factor: usize,
    },
    Focal {
        logits: Var,
        target: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    Dice {
        logits: Var,
        target: Vec<f64>,
        eps: f64,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Leaves may borrow their values, so frozen weights are never copied onto
/// the tape. Nodes are appended in evaluation order, which is therefore a
/// valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

pub(crate) fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-pixel focal term and its derivative w.r.t. the logit.
fn focal_parts(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if t > 0.5 {
        let logp = -softplus(-x);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * logp;
        let d = alpha * (gamma * q.powf(gamma) * p * logp - q.powf(gamma + 1.0));
        (loss, d)
    } else {
        let logq = -softplus(x);
        let loss = -(1.0 - alpha) * p.powf(gamma) * logq;
        let d = -(1.0 - alpha) * (gamma * p.powf(gamma) * (1.0 - p) * logq - p.powf(gamma + 1.0));
        (loss, d)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that gradients flow into.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf treated as a constant.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf whose gradient is recorded only when `trainable`.
    pub fn input(&mut self, value: &'a Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    fn op_dims(&self, v: Var, trans: bool) -> Result<(usize, usize)> {
        let (r, c) = self.value(v).dims2()?;
        Ok(if trans { (c, r) } else { (r, c) })
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.op_dims(a, ta)?;
        let (k2, n) = self.op_dims(b, tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`, the shape of a linear layer with weights stored `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip("mul", self.value(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(row).len() != c {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(row).data();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    /// `x · wᵀ + b` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length `c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + width > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, width]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let t = Tensor::new(vec![r, width], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Validation("concat of zero tensors".into()));
        };
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    /// Column means of an `[r, c]` tensor, shaped `[1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let t = Tensor::new(vec![1, c], out)?;
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    pub fn mean_pool_hw(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).mean_pool_hw()?;
        Ok(self.push(t, Op::MeanPoolHw(x), &[x]))
    }

    /// Lays out per-token cell logits `[grid², cells²]` as a square image,
    /// repeating every cell `factor × factor` times (nearest neighbour).
    pub fn cells_to_image(&mut self, x: Var, grid: usize, cells: usize, factor: usize) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if n != grid * grid || k != cells * cells {
            return Err(Error::dim("cells_to_image", self.shape(x), &[grid * grid, cells * cells]));
        }
        let side = grid * cells * factor;
        let xv = self.value(x).data();
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for xx in 0..side {
                out[y * side + xx] = xv[cell_index(y, xx, grid, cells, factor)];
            }
        }
        let t = Tensor::new(vec![side, side], out)?;
        Ok(self.push(
            t,
            Op::CellsToImage {
                x,
                grid,
                cells,
                factor,
            },
            &[x],
        ))
    }

    /// Mean binary focal loss over pixels.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::dim("focal_loss", self.shape(logits), target.shape()));
        }
        let n = target.len() as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| focal_parts(x, t, alpha, gamma).0)
            .sum();
        let op = Op::Focal {
            logits,
            target: target.data().to_vec(),
            alpha,
            gamma,
        };
        Ok(self.push(Tensor::scalar(total / n), op, &[logits]))
    }

    /// Soft dice loss `1 - (2 Σ p t + eps) / (Σ p + Σ t + eps)` with `p = σ(logits)`.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::dim("dice_loss", self.shape(logits), target.shape()));
        }
        let (inter, s) = dice_sums(self.value(logits).data(), target.data());
        let loss = 1.0 - (2.0 * inter + eps) / (s + eps);
        let op = Op::Dice {
            logits,
            target: target.data().to_vec(),
            eps,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean softmax cross-entropy of `[b, classes]` logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let xv = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            loss += -(row[labels[i]] - m - z.ln());
        }
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / b as f64), op, &[logits]))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, k) = self.op_dims(a, ta).expect("matmul lhs");
                let n = out.shape()[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(da) = self.grad_buf(grads, a) {
                    if ta {
                        gemm(k, n, m, bv, tb, g, true, da, 1.0);
                    } else {
                        gemm(m, n, k, g, false, bv, !tb, da, 1.0);
                    }
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    if tb {
                        gemm(n, m, k, g, true, av, ta, db, 1.0);
                    } else {
                        gemm(k, m, n, av, !ta, g, false, db, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, a) {
                    axpy(d, g, 1.0);
                }
                if let Some(d) = self.grad_buf(grads, b) {
                    axpy(d, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(d) = self.grad_buf(grads, a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.grad_buf(grads, b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(d) = self.grad_buf(grads, a) {
                    axpy(d, g, s);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(d) = self.grad_buf(grads, a) {
                    axpy(d, g, 1.0);
                }
            }
            &Op::AddRow(x, row) => {
                if let Some(d) = self.grad_buf(grads, x) {
                    axpy(d, g, 1.0);
                }
                let c = out.shape()[1];
                if let Some(d) = self.grad_buf(grads, row) {
                    for gr in g.chunks(c) {
                        axpy(d, gr, 1.0);
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                if let Some(d) = self.grad_buf(grads, a) {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * gelu_parts(x).1;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(d) = self.grad_buf(grads, a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                let c = out.shape()[1];
                if let Some(d) = self.grad_buf(grads, a) {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = out.shape()[1];
                let gv = self.value(*gamma).data();
                if let Some(d) = self.grad_buf(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, g), h) in d.iter_mut().zip(gr).zip(hr) {
                            *d += g * h;
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *beta) {
                    for gr in g.chunks(c) {
                        axpy(d, gr, 1.0);
                    }
                }
                if let Some(d) = self.grad_buf(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (row, ((dr, gr), hr)) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] += rstd[row] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let c = self.value(x).shape()[1];
                let w = out.shape()[1];
                if let Some(d) = self.grad_buf(grads, x) {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(w)) {
                        axpy(&mut dr[start..start + w], gr, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if let Some(d) = self.grad_buf(grads, p) {
                        for (dr, gr) in d.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(dr, &gr[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            &Op::Reshape(x) => {
                if let Some(d) = self.grad_buf(grads, x) {
                    axpy(d, g, 1.0);
                }
            }
            &Op::Sum(x) => {
                if let Some(d) = self.grad_buf(grads, x) {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            &Op::MeanRows(x) => {
                let (r, c) = self.value(x).dims2().expect("mean_rows input");
                if let Some(d) = self.grad_buf(grads, x) {
                    for dr in d.chunks_mut(c) {
                        axpy(dr, g, 1.0 / r as f64);
                    }
                }
            }
            &Op::MeanPoolHw(x) => {
                let s = self.value(x).shape();
                let (hw, dd) = (s[1] * s[2], s[3]);
                if let Some(d) = self.grad_buf(grads, x) {
                    for (bi, db) in d.chunks_mut(hw * dd).enumerate() {
                        let gb = &g[bi * dd..(bi + 1) * dd];
                        for dr in db.chunks_mut(dd) {
                            axpy(dr, gb, 1.0 / hw as f64);
                        }
                    }
                }
            }
            &Op::CellsToImage {
                x,
                grid,
                cells,
                factor,
            } => {
                let side = grid * cells * factor;
                if let Some(d) = self.grad_buf(grads, x) {
                    for y in 0..side {
                        for xx in 0..side {
                            d[cell_index(y, xx, grid, cells, factor)] += g[y * side + xx];
                        }
                    }
                }
            }
            Op::Focal {
                logits,
                target,
                alpha,
                gamma,
            } => {
                let n = target.len() as f64;
                let xv = self.value(*logits).data();
                if let Some(d) = self.grad_buf(grads, *logits) {
                    for ((d, &x), &t) in d.iter_mut().zip(xv).zip(target) {
                        *d += g[0] * focal_parts(x, t, *alpha, *gamma).1 / n;
                    }
                }
            }
            Op::Dice { logits, target, eps } => {
                let xv = self.value(*logits).data();
                let (inter, s) = dice_sums(xv, target);
                let den = s + eps;
                let num = 2.0 * inter + eps;
                if let Some(d) = self.grad_buf(grads, *logits) {
                    for ((d, &x), &t) in d.iter_mut().zip(xv).zip(target) {
                        let p = sigmoid(x);
                        let dldp = -(2.0 * t * den - num) / (den * den);
                        *d += g[0] * dldp * p * (1.0 - p);
                    }
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b.max(1);
                if let Some(d) = self.grad_buf(grads, *logits) {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            d[i * c + j] += g[0] * (probs[i * c + j] - onehot) / b as f64;
                        }
                    }
                }
            }
        }
    }
}

fn cell_index(y: usize, x: usize, grid: usize, cells: usize, factor: usize) -> usize {
    let span = cells * factor;
    let token = (y / span) * grid + x / span;
    let cell = ((y % span) / factor) * cells + (x % span) / factor;
    token * cells * cells + cell
}

fn dice_sums(logits: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut s = 0.0;
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x);
        inter += p * t;
        s += p + t;
    }
    (inter, s)
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
