//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants, so evaluation-only
//! passes record no backward information. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a valid reverse topological order
//! because a node can only reference earlier nodes.

use crate::gemm::{gemm, Layout};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Var, spec: Conv2dSpec },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MseRows { pred: Var, target: Tensor, mask: Tensor },
    BceRows { logits: Var, target: Tensor },
    L1Norm(Var),
    L2Norm(Var),
    Sign(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `shape` when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

fn conv_out(extent: usize, kernel: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = extent + 2 * spec.padding;
    (padded >= kernel).then(|| (padded - kernel) / spec.stride + 1)
}

struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
    spec: Conv2dSpec,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfold one image `[C, H, W]` into `[C*k*k, OH*OW]`.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.spec.stride as isize, self.spec.padding as isize);
        let ohw = self.out_len();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * ohw..][..ohw];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= self.width as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add columns back into an image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.spec.stride as isize, self.spec.padding as isize);
        let ohw = self.out_len();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * ohw..][..ohw];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Record a leaf. Gradients are only accumulated for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric("non-finite leaf value"));
        }
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite output from {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b)).map_err(|_| self.mismatch("add", a, b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b)).map_err(|_| self.mismatch("sub", a, b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| self.mismatch("mul", a, b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).scale(k);
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_bias", self.value(x))?;
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..m {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Affine map `x W + b` for `x: [m, in]`, `W: [in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// 2-d convolution of `[B, C, H, W]` with `[O, C, k, k]` plus a length-`O` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        if !matches!(spec.stride, 1 | 2) {
            return Err(Error::dim("conv2d", format!("stride {} unsupported", spec.stride)));
        }
        let g = self.conv_geometry(input, weight, bias, spec)?;
        let mut out = vec![0.0; g.batch * g.filters * g.out_len()];
        let mut cols = vec![0.0; g.patch_len() * g.out_len()];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bvals = self.value(bias).data();
        let image_len = g.channels * g.height * g.width;
        for b in 0..g.batch {
            g.im2col(&x[b * image_len..(b + 1) * image_len], &mut cols);
            let dst = &mut out[b * g.filters * g.out_len()..(b + 1) * g.filters * g.out_len()];
            for (o, chunk) in dst.chunks_mut(g.out_len()).enumerate() {
                chunk.fill(bvals[o]);
            }
            gemm(g.filters, g.patch_len(), g.out_len(), w, Layout::Normal, &cols, Layout::Normal, dst, 1.0);
        }
        let out = Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)?;
        self.push("conv2d", out, Op::Conv2d { input, weight, bias, spec }, &[input, weight, bias])
    }

    fn conv_geometry(&self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<ConvGeometry> {
        let (&[batch, channels, height, width], &[filters, wc, kh, kw]) =
            (self.shape(input), self.shape(weight))
        else {
            return Err(self.mismatch("conv2d", input, weight));
        };
        if wc != channels || kh != kw || self.value(bias).len() != filters {
            return Err(self.mismatch("conv2d", input, weight));
        }
        let (Some(out_h), Some(out_w)) = (conv_out(height, kh, spec), conv_out(width, kw, spec)) else {
            return Err(Error::dim("conv2d", "kernel larger than padded input"));
        };
        Ok(ConvGeometry { batch, channels, height, width, filters, kernel: kh, out_h, out_w, spec })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Concatenate 2-d tensors along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (m, _) = matrix_dims("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat", self.value(p))?;
            if r != m {
                return Err(self.mismatch("concat", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice", self.value(x))?;
        if start >= end || end > n {
            return Err(Error::dim("slice", format!("range {start}..{end} of {n} columns")));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&self.value(x).row(r)[start..end]);
        }
        let out = Tensor::new(vec![m, end - start], out)?;
        self.push("slice", out, Op::Slice { input: x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Per-row masked mean squared error: `[B, n] -> [B]`.
    ///
    /// Each row averages `(pred - target)^2` over entries where `mask` is 1.
    /// A row with an all-zero mask contributes 0.
    pub fn mse_rows(&mut self, pred: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim("mse_loss", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let mask = match mask {
            Some(m) => {
                same_shape("mse_loss", p, m)?;
                m.clone()
            }
            None => Tensor::ones(p.shape()),
        };
        let rows = p.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (pr, tr, mr) = (p.row(r), target.row(r), mask.row(r));
            let count: f64 = mr.iter().sum();
            let sq: f64 = pr.iter().zip(tr).zip(mr).map(|((a, b), w)| w * (a - b) * (a - b)).sum();
            out.push(if count > 0.0 { sq / count } else { 0.0 });
        }
        let out = Tensor::from_vec(out);
        self.push("mse_loss", out, Op::MseRows { pred, target: target.clone(), mask }, &[pred])
    }

    /// Scalar mean squared error over all entries.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let rows = self.mse_rows(pred, target, None)?;
        self.mean(rows)
    }

    /// Per-row binary cross-entropy with logits, averaged over columns: `[B, n] -> [B]`.
    pub fn bce_rows(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != target.shape() {
            return Err(Error::dim("bce_with_logits_loss", format!("{:?} vs {:?}", l.shape(), target.shape())));
        }
        let rows = l.rows();
        let n = l.row_len() as f64;
        let out: Vec<f64> = (0..rows)
            .map(|r| l.row(r).iter().zip(target.row(r)).map(|(&x, &t)| bce_with_logits(x, t)).sum::<f64>() / n)
            .collect();
        let out = Tensor::from_vec(out);
        self.push("bce_with_logits_loss", out, Op::BceRows { logits, target: target.clone() }, &[logits])
    }

    pub fn bce_with_logits_loss(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let rows = self.bce_rows(logits, target)?;
        self.mean(rows)
    }

    /// Sum of absolute values over the whole tensor.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        self.push("l1_norm", out, Op::L1Norm(x), &[x])
    }

    /// Euclidean norm over the whole tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt());
        self.push("l2_norm", out, Op::L2Norm(x), &[x])
    }

    /// Elementwise sign with `sign(0) = 0`. Its derivative is zero everywhere.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sign);
        self.push("sign", out, Op::Sign(x), &[x])
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes through on the closed interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::contract(format!("clamp bounds ({lo}, {hi})")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { input: x, lo, hi }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || g.zip_map(bv, |gi, x| gi * x).expect("shape checked"));
                self.accumulate(grads, *b, || g.zip_map(av, |gi, x| gi * x).expect("shape checked"));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, || g.scale(*k)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                self.accumulate(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, &mut da, 0.0);
                    Tensor::new(vec![m, k], da).expect("matmul grad shape")
                });
                self.accumulate(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, &mut db, 0.0);
                    Tensor::new(vec![k, n], db).expect("matmul grad shape")
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, || g.clone());
                self.accumulate(grads, *bias, || {
                    let n = g.row_len();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    Tensor::new(self.shape(*bias).to_vec(), db).expect("bias grad shape")
                });
            }
            Op::Conv2d { input, weight, bias, spec } => self.conv_backward(g, *input, *weight, *bias, *spec, grads)?,
            Op::Relu(x) => self.accumulate(grads, *x, || g.zip_map(y, |gi, yi| if yi > 0.0 { gi } else { 0.0 }).expect("shape")),
            Op::Tanh(x) => self.accumulate(grads, *x, || g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)).expect("shape")),
            Op::Sigmoid(x) => self.accumulate(grads, *x, || g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)).expect("shape")),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, || g.clone().reshape(&shape).expect("reshape grad"));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = (self.shape(p)[0], self.shape(p)[1]);
                    let off = offset;
                    self.accumulate(grads, p, || {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        Tensor::new(vec![m, w], d).expect("concat grad shape")
                    });
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let shape = self.shape(*input).to_vec();
                self.accumulate(grads, *input, || {
                    let mut d = Tensor::zeros(&shape);
                    for r in 0..shape[0] {
                        d.row_mut(r)[*start..*start + g.row_len()].copy_from_slice(g.row(r));
                    }
                    d
                });
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, || Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, || Tensor::full(&shape, g.item() / n));
            }
            Op::MseRows { pred, target, mask } => {
                let p = self.value(*pred);
                self.accumulate(grads, *pred, || {
                    let mut d = Tensor::zeros(p.shape());
                    for r in 0..p.rows() {
                        let count: f64 = mask.row(r).iter().sum();
                        if count == 0.0 {
                            continue;
                        }
                        let scale = 2.0 * g.data()[r] / count;
                        let (pr, tr, mr) = (p.row(r), target.row(r), mask.row(r));
                        for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = scale * mr[j] * (pr[j] - tr[j]);
                        }
                    }
                    d
                });
            }
            Op::BceRows { logits, target } => {
                let l = self.value(*logits);
                self.accumulate(grads, *logits, || {
                    let n = l.row_len() as f64;
                    let mut d = Tensor::zeros(l.shape());
                    for r in 0..l.rows() {
                        let scale = g.data()[r] / n;
                        let (lr, tr) = (l.row(r), target.row(r));
                        for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = scale * (sigmoid(lr[j]) - tr[j]);
                        }
                    }
                    d
                });
            }
            Op::L1Norm(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, || self.value(*x).map(|v| gv * sign(v)));
            }
            Op::L2Norm(x) => {
                let norm = y.item();
                let gv = g.item();
                self.accumulate(grads, *x, || {
                    if norm > 0.0 {
                        self.value(*x).map(|v| gv * v / norm)
                    } else {
                        Tensor::zeros(self.shape(*x))
                    }
                });
            }
            Op::Sign(x) => self.accumulate(grads, *x, || Tensor::zeros(self.shape(*x))),
            Op::Clamp { input, lo, hi } => {
                let xv = self.value(*input);
                self.accumulate(grads, *input, || {
                    g.zip_map(xv, |gi, v| if v >= *lo && v <= *hi { gi } else { 0.0 }).expect("shape")
                });
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let geo = self.conv_geometry(input, weight, bias, spec)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let gd = g.data();
        let (plen, olen) = (geo.patch_len(), geo.out_len());
        let image_len = geo.channels * geo.height * geo.width;
        let block = geo.filters * olen;

        if self.wants(bias) {
            let mut db = vec![0.0; geo.filters];
            for b in 0..geo.batch {
                for (o, d) in db.iter_mut().enumerate() {
                    *d += gd[b * block + o * olen..b * block + (o + 1) * olen].iter().sum::<f64>();
                }
            }
            let db = Tensor::new(self.shape(bias).to_vec(), db)?;
            self.accumulate(grads, bias, || db);
        }

        let want_w = self.wants(weight);
        let want_x = self.wants(input);
        if !want_w && !want_x {
            return Ok(());
        }
        let mut cols = vec![0.0; plen * olen];
        let mut dw = if want_w { vec![0.0; geo.filters * plen] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
        for b in 0..geo.batch {
            let gout = &gd[b * block..(b + 1) * block];
            if want_w {
                geo.im2col(&x[b * image_len..(b + 1) * image_len], &mut cols);
                gemm(geo.filters, olen, plen, gout, Layout::Normal, &cols, Layout::Transposed, &mut dw, 1.0);
            }
            if want_x {
                gemm(plen, geo.filters, olen, w, Layout::Transposed, gout, Layout::Normal, &mut cols, 0.0);
                geo.col2im(&cols, &mut dx[b * image_len..(b + 1) * image_len]);
            }
        }
        if want_w {
            let dw = Tensor::new(self.shape(weight).to_vec(), dw)?;
            self.accumulate(grads, weight, || dw);
        }
        if want_x {
            let dx = Tensor::new(self.shape(input).to_vec(), dx)?;
            self.accumulate(grads, input, || dx);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(c.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(c),
        }
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

/// `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, b, Conv2dSpec { stride: 1, padding: 0 }).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv_padded_stride_two_matches_direct_sum() {
        // Hand oracle: 1x1x4x4 input 0..16, 3x3 ones kernel, stride 2, pad 1.
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &data)).unwrap();
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, w, b, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        let direct = |cy: isize, cx: isize| {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (cy + dy, cx + dx);
                    if (0..4).contains(&yy) && (0..4).contains(&xx) {
                        s += data[(yy * 4 + xx) as usize];
                    }
                }
            }
            s
        };
        assert_eq!(tape.value(y).data(), &[direct(0, 0), direct(0, 2), direct(2, 0), direct(2, 2)]);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
        assert_eq!(grads.get(y).unwrap().item(), 1.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        let m = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(m, m), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let mut tape = Tape::new();
        assert!(matches!(tape.leaf(Tensor::scalar(f64::NAN), true), Err(Error::Numeric(_))));
        let big = tape.constant(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(tape.mul(big, big), Err(Error::Numeric(_))));
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0)).unwrap();
        let b = tape.mul(a, a).unwrap();
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-2.0), -1.0);
    }

    #[test]
    fn masked_mse_row_without_valid_entries_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let target = Tensor::zeros(&[2, 2]);
        let mask = t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
        let rows = tape.mse_rows(p, &target, Some(&mask)).unwrap();
        assert_eq!(tape.value(rows).data(), &[0.0, 9.0]);
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0, 6.0, 0.0]);
    }
}
