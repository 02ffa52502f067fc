//! Reverse-mode differentiation over dense tensors.
//!
//! Every forward op appends a node to the [`Tape`]; nodes are stored in
//! creation order, which is a topological order because an op can only
//! reference nodes that already exist. [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates adjoints.
//!
//! All forward ops reject non-finite results, so a NaN never silently reaches
//! the optimizer.

use std::sync::Arc;

use super::sparse::SparseMatrix;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul {
        a: Arc<SparseMatrix<T>>,
        x: Var,
    },
    SparseStepMatMul {
        ops: Vec<Arc<SparseMatrix<T>>>,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L1 {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
    },
    StandardizeSteps {
        x: Var,
        mask: Vec<T>,
        /// Per step: `1/std`, or 1 where the std guard fired.
        inv_std: Vec<T>,
        count: Vec<usize>,
        guarded: Vec<bool>,
    },
    EdgeDiffL1 {
        x: Var,
        steps: usize,
        edges: Arc<Vec<(usize, usize)>>,
        /// `edges.len() x steps`: reference difference and mask weight.
        reference: Vec<T>,
        weight: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::SparseMatMul { x, .. }
            | Op::SparseStepMatMul { x, .. }
            | Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Softplus(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::StandardizeSteps { x, .. }
            | Op::EdgeDiffL1 { x, .. } => vec![*x],
            Op::L1 { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one tape per sample.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `[n, n] sparse x [n, f] -> [n, f]`
    pub fn sparse_matmul(&mut self, a: Arc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != a.cols() {
            return Err(shape_err("sparse_matmul", &a.shape(), sx));
        }
        let f = sx[1];
        let mut out = vec![T::zero(); a.rows() * f];
        a.mul_dense_acc(self.value(x).data(), f, &mut out);
        let shape = vec![a.rows(), f];
        self.push(Tensor::new(shape, out)?, Op::SparseMatMul { a, x }, "sparse_matmul")
    }

    /// Applies `ops[t]` to the `[n, f]` slice at step `t` of an `[n, steps, f]`
    /// tensor. A single operator is reused for every step.
    pub fn sparse_step_matmul(&mut self, ops: Vec<Arc<SparseMatrix<T>>>, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || ops.is_empty() || (ops.len() != 1 && ops.len() != sx[1]) {
            return Err(shape_err("sparse_step_matmul", &[ops.len()], &sx));
        }
        let (n, steps, f) = (sx[0], sx[1], sx[2]);
        if ops.iter().any(|a| a.rows() != n || a.cols() != n) {
            return Err(shape_err("sparse_step_matmul", &ops[0].shape(), &sx));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * steps * f];
        for t in 0..steps {
            let a = &ops[if ops.len() == 1 { 0 } else { t }];
            for i in 0..n {
                let dst = (i * steps + t) * f;
                for (j, w) in a.row(i) {
                    let src = (j * steps + t) * f;
                    for c in 0..f {
                        out[dst + c] += w * xd[src + c];
                    }
                }
            }
        }
        self.push(Tensor::new(sx, out)?, Op::SparseStepMatMul { ops, x }, "sparse_step_matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x * scale + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * scale + shift);
        self.push(out, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    /// Adds a `[f]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        let f = sb[0];
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(f) {
            for (o, &bv) in chunk.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, b }, "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), "softplus")
    }

    /// `x[..] @ w + b` applied over the last axis; leading axes are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(shape_err("linear", &sx, &sw));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(sw[1]);
        self.reshape(y, &out_shape)
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `x: [n, steps, c_in]`, `w: [k, c_in, c_out]`, `b: [c_out]`. Output step
    /// `t` reads input steps `t - (k-1-j)*dilation` for `j in 0..k`, with zeros
    /// left of the sequence start.
    pub fn conv1d_causal_dilated(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || dilation == 0 {
            return Err(shape_err("conv1d_causal_dilated", &sx, &sw));
        }
        let (n, steps, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d_causal_dilated bias", self.shape(b), &[cout]));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * steps * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for chunk in out.chunks_mut(cout) {
                chunk.copy_from_slice(bd);
            }
        }
        for node in 0..n {
            for t in 0..steps {
                let dst = (node * steps + t) * cout;
                for tap in 0..k {
                    let lag = (k - 1 - tap) * dilation;
                    if lag > t {
                        continue;
                    }
                    let src = (node * steps + t - lag) * cin;
                    for c in 0..cin {
                        let xv = xd[src + c];
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &wd[(tap * cin + c) * cout..(tap * cin + c + 1) * cout];
                        for (o, &wv) in out[dst..dst + cout].iter_mut().zip(wrow) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, steps, cout], out)?,
            Op::Conv1d { x, w, b, dilation },
            "conv1d_causal_dilated",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize_lossy(v.numel());
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// `sum(|pred - target| * mask)`. Only entries with a nonzero mask read
    /// `target`; the subgradient at `pred == target` is zero.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(shape_err("l1_loss", p.shape(), target.shape()));
        }
        let mut total = T::zero();
        let mut tgt = vec![T::zero(); p.numel()];
        for (k, (&pv, &m)) in p.data().iter().zip(mask.data()).enumerate() {
            if m != T::zero() {
                tgt[k] = target.data()[k];
                total += (pv - tgt[k]).abs() * m;
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::L1 {
                pred,
                target: tgt,
                mask: mask.data().to_vec(),
            },
            "l1_loss",
        )
    }

    /// Z-scores each column (step) of an `[n, steps]` tensor over the rows
    /// whose mask is 1. Masked-out entries become 0. When the masked standard
    /// deviation is below `eps` only the mean is removed.
    pub fn standardize_steps(&mut self, x: Var, mask: &Tensor<T>, eps: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape() != mask.shape() {
            return Err(shape_err("standardize_steps", xv.shape(), mask.shape()));
        }
        let (n, steps) = (xv.shape()[0], xv.shape()[1]);
        let (xd, md) = (xv.data(), mask.data());
        let mut out = vec![T::zero(); n * steps];
        let mut inv_std = vec![T::one(); steps];
        let mut count = vec![0usize; steps];
        let mut guarded = vec![true; steps];
        for t in 0..steps {
            let (mean, std, c) = masked_moments(xd, md, n, steps, t);
            count[t] = c;
            if c == 0 {
                continue;
            }
            if std >= eps {
                inv_std[t] = T::one() / std;
                guarded[t] = false;
            }
            for i in 0..n {
                if md[i * steps + t] != T::zero() {
                    out[i * steps + t] = (xd[i * steps + t] - mean) * inv_std[t];
                }
            }
        }
        self.push(
            Tensor::new(vec![n, steps], out)?,
            Op::StandardizeSteps {
                x,
                mask: md.to_vec(),
                inv_std,
                count,
                guarded,
            },
            "standardize_steps",
        )
    }

    /// `sum_t sum_(i,j) |(x[j,t] - x[i,t]) - reference[e,t]| * weight[e,t]`
    /// for `x: [n, steps]`; `reference` and `weight` are `[edges, steps]`.
    pub fn edge_diff_l1(
        &mut self,
        x: Var,
        edges: Arc<Vec<(usize, usize)>>,
        reference: &Tensor<T>,
        weight: &Tensor<T>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || reference.shape() != [edges.len(), xv.shape()[1]] || reference.shape() != weight.shape() {
            return Err(shape_err("edge_diff_l1", xv.shape(), reference.shape()));
        }
        let (n, steps) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::invalid(format!("edge ({i}, {j}) outside {n} nodes")));
        }
        let xd = xv.data();
        let mut total = T::zero();
        for (e, &(i, j)) in edges.iter().enumerate() {
            for t in 0..steps {
                let w = weight.data()[e * steps + t];
                if w != T::zero() {
                    let d = xd[j * steps + t] - xd[i * steps + t] - reference.data()[e * steps + t];
                    total += d.abs() * w;
                }
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::EdgeDiffL1 {
                x,
                steps,
                edges,
                reference: reference.data().to_vec(),
                weight: weight.data().to_vec(),
            },
            "edge_diff_l1",
        )
    }

    /// Adjoints of `loss` (a single-element tensor) with respect to every
    /// node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    // ga[m,k] = g[m,n] * b^T
                    let mut ga = vec![T::zero(); m * k];
                    let bd = vb.data();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += gd[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    accumulate(grads, *a, va.shape(), ga);
                }
                if self.requires_grad(*b) {
                    // gb[k,n] = a^T * g
                    let mut gb = vec![T::zero(); k * n];
                    let ad = va.data();
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, vb.shape(), gb);
                }
            }
            Op::SparseMatMul { a, x } => {
                if self.requires_grad(*x) {
                    let sx = self.shape(*x);
                    let mut gx = vec![T::zero(); sx[0] * sx[1]];
                    a.mul_dense_transpose_acc(gd, sx[1], &mut gx);
                    accumulate(grads, *x, sx, gx);
                }
            }
            Op::SparseStepMatMul { ops, x } => {
                if self.requires_grad(*x) {
                    let sx = self.shape(*x);
                    let (n, steps, f) = (sx[0], sx[1], sx[2]);
                    let mut gx = vec![T::zero(); n * steps * f];
                    for t in 0..steps {
                        let a = &ops[if ops.len() == 1 { 0 } else { t }];
                        for i in 0..n {
                            let src = (i * steps + t) * f;
                            for (j, w) in a.row(i) {
                                let dst = (j * steps + t) * f;
                                for c in 0..f {
                                    gx[dst + c] += w * gd[src + c];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, sx, gx);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        accumulate(grads, v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.shape(), gd.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.shape(), gd.iter().zip(vb).map(|(&gv, &y)| gv * y).collect());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.shape(), gd.iter().zip(va).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Affine { x, scale } => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g.shape(), gd.iter().map(|&v| v * *scale).collect());
                }
            }
            Op::AddBias { x, b } => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g.shape(), gd.to_vec());
                }
                if self.requires_grad(*b) {
                    let f = self.shape(*b)[0];
                    let mut gb = vec![T::zero(); f];
                    for chunk in gd.chunks(f) {
                        for (o, &v) in gb.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, &[f], gb);
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let xd = self.value(*x).data();
                    let gx = gd
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, g.shape(), gx);
                }
            }
            Op::Tanh(x) => {
                if self.requires_grad(*x) {
                    let yd = node.value.data();
                    let gx = gd.iter().zip(yd).map(|(&gv, &y)| gv * (T::one() - y * y)).collect();
                    accumulate(grads, *x, g.shape(), gx);
                }
            }
            Op::Softplus(x) => {
                if self.requires_grad(*x) {
                    let xd = self.value(*x).data();
                    let gx = gd.iter().zip(xd).map(|(&gv, &v)| gv * sigmoid(v)).collect();
                    accumulate(grads, *x, g.shape(), gx);
                }
            }
            Op::Conv1d { x, w, b, dilation } => self.conv1d_backward(*x, *w, *b, *dilation, gd, grads),
            Op::Reshape(x) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, self.shape(*x), gd.to_vec());
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    accumulate(grads, *x, self.shape(*x), vec![gd[0]; n]);
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    let v = gd[0] / T::from_usize_lossy(n);
                    accumulate(grads, *x, self.shape(*x), vec![v; n]);
                }
            }
            Op::L1 { pred, target, mask } => {
                if self.requires_grad(*pred) {
                    let pd = self.value(*pred).data();
                    let gx = pd
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((&p, &t), &m)| gd[0] * m * sign(p - t))
                        .collect();
                    accumulate(grads, *pred, self.shape(*pred), gx);
                }
            }
            Op::StandardizeSteps {
                x,
                mask,
                inv_std,
                count,
                guarded,
            } => {
                if self.requires_grad(*x) {
                    let sx = self.shape(*x);
                    let (n, steps) = (sx[0], sx[1]);
                    let z = node.value.data();
                    let mut gx = vec![T::zero(); n * steps];
                    for t in 0..steps {
                        if count[t] == 0 {
                            continue;
                        }
                        let c = T::from_usize_lossy(count[t]);
                        let (mut g_mean, mut gz_mean) = (T::zero(), T::zero());
                        for i in 0..n {
                            let k = i * steps + t;
                            if mask[k] != T::zero() {
                                g_mean += gd[k];
                                gz_mean += gd[k] * z[k];
                            }
                        }
                        g_mean /= c;
                        gz_mean /= c;
                        for i in 0..n {
                            let k = i * steps + t;
                            if mask[k] != T::zero() {
                                gx[k] = if guarded[t] {
                                    gd[k] - g_mean
                                } else {
                                    (gd[k] - g_mean - z[k] * gz_mean) * inv_std[t]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, sx, gx);
                }
            }
            Op::EdgeDiffL1 {
                x,
                steps,
                edges,
                reference,
                weight,
            } => {
                if self.requires_grad(*x) {
                    let sx = self.shape(*x);
                    let xd = self.value(*x).data();
                    let steps = *steps;
                    let mut gx = vec![T::zero(); sx[0] * steps];
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        for t in 0..steps {
                            let w = weight[e * steps + t];
                            if w == T::zero() {
                                continue;
                            }
                            let d = xd[j * steps + t] - xd[i * steps + t] - reference[e * steps + t];
                            let s = gd[0] * w * sign(d);
                            gx[j * steps + t] += s;
                            gx[i * steps + t] -= s;
                        }
                    }
                    accumulate(grads, *x, sx, gx);
                }
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, steps, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut gx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); wd.len()] } else { Vec::new() };
        for node in 0..n {
            for t in 0..steps {
                let go = &gd[(node * steps + t) * cout..(node * steps + t + 1) * cout];
                for tap in 0..k {
                    let lag = (k - 1 - tap) * dilation;
                    if lag > t {
                        continue;
                    }
                    let src = (node * steps + t - lag) * cin;
                    for c in 0..cin {
                        let base = (tap * cin + c) * cout;
                        if need_x {
                            let mut acc = T::zero();
                            for (o, &gv) in go.iter().enumerate() {
                                acc += wd[base + o] * gv;
                            }
                            gx[src + c] += acc;
                        }
                        if need_w {
                            let xv = xd[src + c];
                            if xv != T::zero() {
                                for (o, &gv) in go.iter().enumerate() {
                                    gw[base + o] += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, x, &sx, gx);
        }
        if need_w {
            accumulate(grads, w, &sw, gw);
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut gb = vec![T::zero(); cout];
                for chunk in gd.chunks(cout) {
                    for (o, &v) in gb.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, b, &[cout], gb);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape matches value");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, i-k-j order for a fixed summation sequence.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn masked_moments<T: Real>(x: &[T], mask: &[T], n: usize, steps: usize, t: usize) -> (T, T, usize) {
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in 0..n {
        if mask[i * steps + t] != T::zero() {
            sum += x[i * steps + t];
            count += 1;
        }
    }
    if count == 0 {
        return (T::zero(), T::zero(), 0);
    }
    let c = T::from_usize_lossy(count);
    let mean = sum / c;
    let mut ss = T::zero();
    for i in 0..n {
        if mask[i * steps + t] != T::zero() {
            let d = x[i * steps + t] - mean;
            ss += d * d;
        }
    }
    (mean, (ss / c).sqrt(), count)
}

fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
