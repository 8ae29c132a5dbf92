use super::{gelu_grad, Graph, Node, Op, PoolKind, Reduction, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

type Grads<T> = Vec<Option<Tensor<T>>>;

/// Adds `delta` into the pending gradient of `v`, reshaped to `v`'s shape.
fn accum<T: Scalar>(grads: &mut Grads<T>, nodes: &[Node<T>], v: Var, delta: Vec<T>) {
    let shape = nodes[v.0].value.shape();
    debug_assert_eq!(delta.len(), nodes[v.0].value.len());
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient matches value shape"));
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf
    /// reachable from `loss`. Accumulators are never reset here.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Grads<T> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut Grads<T>) {
        let nodes = &self.nodes[..];
        let node = &nodes[i];
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                let gref = MatRef::new(gd, m, n);
                let bref = MatRef::new(bv.data(), bv.rows(), bv.cols());
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    // C = A·B => dA = G·Bᵀ;  C = A·Bᵀ => dA = G·B
                    gemm(gref, if *trans_b { bref } else { bref.t() }, &mut da, false);
                    accum(grads, nodes, *a, da);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    let aref = MatRef::new(av.data(), m, k);
                    if *trans_b {
                        gemm(gref.t(), aref, &mut db, false);
                    } else {
                        gemm(aref.t(), gref, &mut db, false);
                    }
                    accum(grads, nodes, *b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accum(grads, nodes, *a, gd.to_vec());
                }
                if needs(b) {
                    accum(grads, nodes, *b, gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accum(grads, nodes, *a, gd.to_vec());
                }
                if needs(b) {
                    accum(grads, nodes, *b, gd.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if needs(a) {
                    accum(grads, nodes, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if needs(b) {
                    accum(grads, nodes, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddRow { x, bias } => {
                if needs(x) {
                    accum(grads, nodes, *x, gd.to_vec());
                }
                if needs(bias) {
                    let c = node.value.cols();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accum(grads, nodes, *bias, db);
                }
            }
            Op::Scale { x, factor } => {
                accum(grads, nodes, *x, gd.iter().map(|&v| v * *factor).collect());
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                accum(grads, nodes, *x, gd.iter().zip(xv).map(|(&g, &v)| g * gelu_grad(v)).collect());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accum(grads, nodes, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let c = node.value.cols();
                let n = T::from_usize(c).unwrap();
                let r = node.value.rows();
                let mut dx = vec![T::zero(); r * c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let grow = &gd[i * c..(i + 1) * c];
                    let (mu, rs) = (mean[i], rstd[i]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mu) * rs;
                        let dxhat = grow[j] * gv[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dg[j] = dg[j] + grow[j] * xhat;
                        db[j] = db[j] + grow[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mu) * rs;
                        let dxhat = grow[j] * gv[j];
                        dx[i * c + j] = rs * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                if needs(x) {
                    accum(grads, nodes, *x, dx);
                }
                if needs(gain) {
                    accum(grads, nodes, *gain, dg);
                }
                if needs(bias) {
                    accum(grads, nodes, *bias, db);
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                dilation,
            } => {
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                let (w, din, dout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let n_out = node.value.rows();
                let gref = MatRef::new(gd, n_out, dout);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut tmp = vec![T::zero(); n_out * din];
                for j in 0..w {
                    let kj = MatRef::new(&kv.data()[j * din * dout..(j + 1) * din * dout], din, dout);
                    if needs(x) {
                        gemm(gref, kj.t(), &mut tmp, false);
                        for t in 0..n_out {
                            let dst = t * stride + j * dilation;
                            for ch in 0..din {
                                dx[dst * din + ch] = dx[dst * din + ch] + tmp[t * din + ch];
                            }
                        }
                    }
                    if needs(kernel) {
                        for t in 0..n_out {
                            let src = t * stride + j * dilation;
                            tmp[t * din..(t + 1) * din].copy_from_slice(&xv.data()[src * din..(src + 1) * din]);
                        }
                        gemm(
                            MatRef::new(&tmp, n_out, din).t(),
                            gref,
                            &mut dk[j * din * dout..(j + 1) * din * dout],
                            false,
                        );
                    }
                }
                if needs(x) {
                    accum(grads, nodes, *x, dx);
                }
                if needs(kernel) {
                    accum(grads, nodes, *kernel, dk);
                }
            }
            Op::ConvTranspose1d { x, kernel, stride } => {
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                let (w, din, dout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let k = xv.rows();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut gj = vec![T::zero(); k * dout];
                for j in 0..w {
                    for t in 0..k {
                        let src = t * stride + j;
                        gj[t * dout..(t + 1) * dout].copy_from_slice(&gd[src * dout..(src + 1) * dout]);
                    }
                    let kj = MatRef::new(&kv.data()[j * din * dout..(j + 1) * din * dout], din, dout);
                    if needs(x) {
                        gemm(MatRef::new(&gj, k, dout), kj.t(), &mut dx, true);
                    }
                    if needs(kernel) {
                        gemm(
                            MatRef::new(xv.data(), k, din).t(),
                            MatRef::new(&gj, k, dout),
                            &mut dk[j * din * dout..(j + 1) * din * dout],
                            false,
                        );
                    }
                }
                if needs(x) {
                    accum(grads, nodes, *x, dx);
                }
                if needs(kernel) {
                    accum(grads, nodes, *kernel, dk);
                }
            }
            Op::Pool1d {
                x,
                kind,
                window,
                stride,
                argmax,
            } => {
                let d = node.value.cols();
                let n_out = node.value.rows();
                let mut dx = vec![T::zero(); nodes[x.0].value.len()];
                match kind {
                    PoolKind::Mean => {
                        let inv = T::one() / T::from_usize(*window).unwrap();
                        for t in 0..n_out {
                            for r in t * stride..t * stride + window {
                                for ch in 0..d {
                                    dx[r * d + ch] = dx[r * d + ch] + gd[t * d + ch] * inv;
                                }
                            }
                        }
                    }
                    PoolKind::Max => {
                        for t in 0..n_out {
                            for ch in 0..d {
                                let r = argmax[t * d + ch];
                                dx[r * d + ch] = dx[r * d + ch] + gd[t * d + ch];
                            }
                        }
                    }
                }
                accum(grads, nodes, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                let lv = &nodes[logits.0].value;
                let v = lv.cols();
                let count = targets.iter().flatten().count();
                if count == 0 {
                    return;
                }
                let scale = match reduction {
                    Reduction::Sum => gd[0],
                    Reduction::Mean => gd[0] / T::from_usize(count).unwrap(),
                };
                let mut dl = vec![T::zero(); lv.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &lv.data()[i * v..(i + 1) * v];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&a| (a - max).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - max).exp() / z;
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[i * v + j] = (p - onehot) * scale;
                    }
                }
                accum(grads, nodes, *logits, dl);
            }
            Op::Sum(x) => {
                accum(grads, nodes, *x, vec![gd[0]; nodes[x.0].value.len()]);
            }
            Op::Norm(x) => {
                let norm = node.value.data()[0];
                let xv = nodes[x.0].value.data();
                let dx = if norm > T::zero() {
                    xv.iter().map(|&v| v * gd[0] / norm).collect()
                } else {
                    vec![T::zero(); xv.len()]
                };
                accum(grads, nodes, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if needs(p) {
                        accum(grads, nodes, *p, gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                        }
                        accum(grads, nodes, *p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &nodes[x.0].value;
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                accum(grads, nodes, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &nodes[x.0].value;
                let c = xv.cols();
                let w = node.value.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for i in 0..xv.rows() {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                accum(grads, nodes, *x, dx);
            }
            Op::GatherCols { x, index } => {
                let xv = &nodes[x.0].value;
                let c = xv.cols();
                let k = node.value.cols().max(1);
                let mut dx = vec![T::zero(); xv.len()];
                for (p, &g) in gd.iter().enumerate() {
                    let dst = (p / k) * c + index[p];
                    dx[dst] = dx[dst] + g;
                }
                accum(grads, nodes, *x, dx);
            }
            Op::SelectRows { x, index } => {
                let xv = &nodes[x.0].value;
                let c = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &src) in index.iter().enumerate() {
                    for ch in 0..c {
                        dx[src * c + ch] = dx[src * c + ch] + gd[r * c + ch];
                    }
                }
                accum(grads, nodes, *x, dx);
            }
            Op::Dropout { x, mask } => {
                accum(grads, nodes, *x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
        }
    }
}
