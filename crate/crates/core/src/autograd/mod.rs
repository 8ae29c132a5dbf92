//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an append-only arena: every operation evaluates eagerly and
//! records its parents, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Nodes whose ancestry contains
//! no gradient-requiring leaf are never visited, which is also how
//! [`Graph::stop_gradient`] and constant inputs cut the flow of gradients.
//!
//! Leaf gradient accumulators persist across `backward` calls until
//! [`Graph::zero_grads`] is called.

mod backward;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamKey;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv1d { x: Var, kernel: Var, stride: usize, dilation: usize },
    ConvTranspose1d { x: Var, kernel: Var, stride: usize },
    Pool1d { x: Var, kind: PoolKind, window: usize, stride: usize, argmax: Vec<usize> },
    StopGradient(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, reduction: Reduction },
    Sum(Var),
    Norm(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherCols { x: Var, index: Arc<[usize]> },
    SelectRows { x: Var, index: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub param: Option<ParamKey>,
    /// Accumulated gradient; only ever populated on gradient-requiring leaves.
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn check_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() > 2 {
        return Err(Error::dim(op, format!("expected a 2-D operand, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Leaf gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamKey, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    /// Direct inputs of `v`; every parent has a smaller index than `v`.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1d { x, kernel, .. } | Op::ConvTranspose1d { x, kernel, .. } => vec![*x, *kernel],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::Scale { x, .. }
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Pool1d { x, .. }
            | Op::StopGradient(x)
            | Op::Sum(x)
            | Op::Norm(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-requiring leaf that is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-requiring leaf whose gradient is collected for `key`.
    pub fn param(&mut self, key: ParamKey, value: Tensor<T>) -> Var {
        let v = self.variable(value);
        self.nodes[v.0].param = Some(key);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (br, bc) = check_2d("matmul", self.value(b))?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}] (trans_b = {trans_b})"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let bref = MatRef::new(self.value(b).data(), br, bc);
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            if trans_b { bref.t() } else { bref },
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = check_2d("add_row", self.value(x))?;
        let bv = self.value(bias);
        if bv.len() != c {
            return Err(Error::dim("add_row", format!("bias of {} for {c} columns", bv.len())));
        }
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let t = Tensor::new([r, c], data)?;
        let rg = self.any_grad(&[x, bias]);
        self.push(t, Op::AddRow { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * factor).collect())?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where `mask[i * cols + j] == false` excludes entry
    /// `(i, j)`; excluded entries come out as exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim(
                "masked_softmax",
                format!("mask of {} for {} scores", mask.len(), self.value(x).len()),
            ));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let (r, c) = check_2d("softmax", self.value(x))?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[i * c + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o / total;
            }
        }
        let t = Tensor::new([r, c], out)?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Per-row normalisation to zero mean / unit (population) variance,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = check_2d("layer_norm", self.value(x))?;
        if c == 0 {
            return Err(Error::degenerate("layer_norm", "zero-width rows"));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", "gain/bias width differs from input"));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(c).unwrap();
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); r * c];
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new([r, c], out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    /// Valid (unpadded) temporal convolution over the rows of `x`.
    ///
    /// `kernel` has shape `[width, d_in, d_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, dilation: usize) -> Result<Var> {
        let (n, din) = check_2d("conv1d", self.value(x))?;
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 || ks[1] != din {
            return Err(Error::dim("conv1d", format!("kernel {ks:?} for input width {din}")));
        }
        if stride == 0 || dilation == 0 || ks[0] == 0 {
            return Err(Error::Config("conv1d needs width, stride and dilation >= 1".into()));
        }
        let (w, dout) = (ks[0], ks[2]);
        let extent = (w - 1) * dilation + 1;
        if n < extent {
            return Err(Error::degenerate(
                "conv1d",
                format!("{n} rows for an effective kernel extent of {extent}"),
            ));
        }
        let n_out = (n - extent) / stride + 1;
        let mut out = vec![T::zero(); n_out * dout];
        let mut gathered = vec![T::zero(); n_out * din];
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        for j in 0..w {
            for t in 0..n_out {
                let src = t * stride + j * dilation;
                gathered[t * din..(t + 1) * din].copy_from_slice(&xv[src * din..(src + 1) * din]);
            }
            gemm(
                MatRef::new(&gathered, n_out, din),
                MatRef::new(&kv[j * din * dout..(j + 1) * din * dout], din, dout),
                &mut out,
                true,
            );
        }
        let t = Tensor::new([n_out, dout], out)?;
        let rg = self.any_grad(&[x, kernel]);
        self.push(
            t,
            Op::Conv1d {
                x,
                kernel,
                stride,
                dilation,
            },
            rg,
        )
    }

    /// Transposed temporal convolution: each input row is spread over
    /// `width` output rows, consecutive inputs `stride` rows apart.
    pub fn conv_transpose1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (k, din) = check_2d("conv_transpose1d", self.value(x))?;
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 || ks[1] != din {
            return Err(Error::dim("conv_transpose1d", format!("kernel {ks:?} for input width {din}")));
        }
        if stride == 0 || ks[0] == 0 {
            return Err(Error::Config("conv_transpose1d needs width and stride >= 1".into()));
        }
        if k == 0 {
            return Err(Error::degenerate("conv_transpose1d", "no input rows"));
        }
        let (w, dout) = (ks[0], ks[2]);
        let n_out = (k - 1) * stride + w;
        let mut out = vec![T::zero(); n_out * dout];
        let mut tap = vec![T::zero(); k * dout];
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        for j in 0..w {
            gemm(
                MatRef::new(xv, k, din),
                MatRef::new(&kv[j * din * dout..(j + 1) * din * dout], din, dout),
                &mut tap,
                false,
            );
            for t in 0..k {
                let dst = t * stride + j;
                for o in 0..dout {
                    out[dst * dout + o] = out[dst * dout + o] + tap[t * dout + o];
                }
            }
        }
        let t = Tensor::new([n_out, dout], out)?;
        let rg = self.any_grad(&[x, kernel]);
        self.push(t, Op::ConvTranspose1d { x, kernel, stride }, rg)
    }

    /// Per-channel pooling over row windows. Max routes its gradient to the
    /// first maximal row of each window.
    pub fn pool1d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let (n, d) = check_2d("pool1d", self.value(x))?;
        if window == 0 || stride == 0 {
            return Err(Error::Config("pool1d needs window and stride >= 1".into()));
        }
        if n < window {
            return Err(Error::degenerate("pool1d", format!("{n} rows for a window of {window}")));
        }
        let n_out = (n - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n_out * d];
        let mut argmax = Vec::new();
        let inv = T::one() / T::from_usize(window).unwrap();
        for t in 0..n_out {
            for ch in 0..d {
                let start = t * stride;
                match kind {
                    PoolKind::Mean => {
                        let s: T = (start..start + window).map(|r| xv[r * d + ch]).sum();
                        out[t * d + ch] = s * inv;
                    }
                    PoolKind::Max => {
                        let mut best = start;
                        for r in start + 1..start + window {
                            if xv[r * d + ch] > xv[best * d + ch] {
                                best = r;
                            }
                        }
                        out[t * d + ch] = xv[best * d + ch];
                        argmax.push(best);
                    }
                }
            }
        }
        let t = Tensor::new([n_out, d], out)?;
        let rg = self.any_grad(&[x]);
        self.push(
            t,
            Op::Pool1d {
                x,
                kind,
                window,
                stride,
                argmax,
            },
            rg,
        )
    }

    /// Forward identity; contributes no gradient to anything upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient(x), false)
            .expect("copy of a finite value is finite")
    }

    /// Row `index[i]` of `x` becomes row `i` of the output (embedding lookup).
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = check_2d("select_rows", self.value(x))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::dim("select_rows", format!("row {bad} of {r}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let t = Tensor::new([index.len(), c], data)?;
        let rg = self.any_grad(&[x]);
        self.push(
            t,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// `out[i][j] = x[i][index[i * k + j]]` for an `n × k` index table.
    pub fn gather_cols(&mut self, x: Var, index: Arc<[usize]>, k: usize) -> Result<Var> {
        let (r, c) = check_2d("gather_cols", self.value(x))?;
        if index.len() != r * k {
            return Err(Error::dim("gather_cols", format!("index of {} for {r}x{k}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::dim("gather_cols", format!("column {bad} of {c}")));
        }
        let xv = self.value(x).data();
        let data = (0..r * k).map(|p| xv[(p / k.max(1)) * c + index[p]]).collect();
        let t = Tensor::new([r, k], data)?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::GatherCols { x, index }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        for t in &tensors {
            check_2d("concat_rows", t)?;
        }
        let t = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = check_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("{pr} vs {r} rows")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new([r, total], data)?;
        let rg = self.any_grad(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = check_2d("slice_rows", self.value(x))?;
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let t = self.value(x).slice_rows(start, len);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = check_2d("slice_cols", self.value(x))?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new([r, len], data)?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::SliceCols { x, start }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Frobenius (flattened L2) norm, as a scalar. The gradient at the
    /// origin is taken to be zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Norm(x), rg)
    }

    /// Softmax cross-entropy of `logits` rows against `targets`; rows whose
    /// target is `None` are ignored. With no counted rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], reduction: Reduction) -> Result<Var> {
        let (r, v) = check_2d("cross_entropy", self.value(logits))?;
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target id {bad} outside vocabulary of {v}")));
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total = total + nll_row(&lv[i * v..(i + 1) * v], t);
                count += 1;
            }
        }
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean if count > 0 => total / T::from_usize(count).unwrap(),
            Reduction::Mean => T::zero(),
        };
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            rg,
        )
    }

    /// Inverted dropout drawing its keep mask from `rng`; identity when
    /// `rate` is zero.
    pub fn dropout_with<R: rand::Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
        }
        let keep: Vec<bool> = (0..self.value(x).len()).map(|_| rng.random::<f64>() >= rate).collect();
        self.dropout(x, &keep, rate)
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(Error::dim("dropout", "mask size"));
        }
        let s = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg)
    }
}

/// `-log softmax(row)[target]`, computed with a max shift.
pub(crate) fn nll_row<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvTranspose1d { .. } => "conv_transpose1d",
        Op::Pool1d { .. } => "pool1d",
        Op::StopGradient(_) => "stop_gradient",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::Norm(_) => "norm",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherCols { .. } => "gather_cols",
        Op::SelectRows { .. } => "select_rows",
        Op::Dropout { .. } => "dropout",
    }
}

#[cfg(test)]
mod tests;
