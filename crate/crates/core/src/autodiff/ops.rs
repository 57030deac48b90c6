use std::ops::Range;

use super::tape::{nearest_source, BinaryKind, Op, UnaryKind, Var};
use crate::error::{HtvError, Result};
use crate::tensor::{axis_split, broadcast_shape, broadcast_strides, strides, Tensor};

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output.
pub(super) fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if a == b {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

struct MatmulLayout {
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    p: usize,
    q: usize,
    r: usize,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<MatmulLayout> {
    let mismatch = || HtvError::Dimension(format!("matmul: cannot multiply {a:?} by {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(mismatch());
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).map_err(|_| mismatch())?;
    Ok(MatmulLayout {
        a_batch_strides: broadcast_strides(ab, &batch),
        b_batch_strides: broadcast_strides(bb, &batch),
        batch,
        p,
        q,
        r,
    })
}

impl MatmulLayout {
    /// (output batch, a matrix index, b matrix index)
    fn batches(&self) -> Vec<(usize, usize, usize)> {
        let n: usize = self.batch.iter().product();
        let st = strides(&self.batch);
        (0..n)
            .map(|o| {
                let (mut ia, mut ib) = (0, 0);
                for d in 0..self.batch.len() {
                    let k = (o / st[d]) % self.batch[d];
                    ia += k * self.a_batch_strides[d];
                    ib += k * self.b_batch_strides[d];
                }
                (o, ia, ib)
            })
            .collect()
    }
}

pub(super) fn matmul_backward_lhs(a_shape: &[usize], b: &Tensor, _out: &[usize], g: &[f64], ga: &mut [f64]) {
    let l = matmul_layout(a_shape, b.shape()).expect("validated in forward");
    let (p, q, r) = (l.p, l.q, l.r);
    let bd = b.data();
    for (o, ia, ib) in l.batches() {
        let gm = &g[o * p * r..(o + 1) * p * r];
        let bm = &bd[ib * q * r..(ib + 1) * q * r];
        let am = &mut ga[ia * p * q..(ia + 1) * p * q];
        // dA = dC · Bᵀ
        for i in 0..p {
            for k in 0..q {
                let mut s = 0.0;
                for j in 0..r {
                    s += gm[i * r + j] * bm[k * r + j];
                }
                am[i * q + k] += s;
            }
        }
    }
}

pub(super) fn matmul_backward_rhs(a: &Tensor, b_shape: &[usize], _out: &[usize], g: &[f64], gb: &mut [f64]) {
    let l = matmul_layout(a.shape(), b_shape).expect("validated in forward");
    let (p, q, r) = (l.p, l.q, l.r);
    let ad = a.data();
    for (o, ia, ib) in l.batches() {
        let gm = &g[o * p * r..(o + 1) * p * r];
        let am = &ad[ia * p * q..(ia + 1) * p * q];
        let bm = &mut gb[ib * q * r..(ib + 1) * q * r];
        // dB = Aᵀ · dC
        for i in 0..p {
            for k in 0..q {
                let aik = am[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..r {
                    bm[k * r + j] += aik * gm[i * r + j];
                }
            }
        }
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let l = matmul_layout(a.shape(), b.shape())?;
    let (p, q, r) = (l.p, l.q, l.r);
    let mut shape = l.batch.clone();
    shape.extend([p, r]);
    let mut out = vec![0.0; shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for (o, ia, ib) in l.batches() {
        let am = &ad[ia * p * q..(ia + 1) * p * q];
        let bm = &bd[ib * q * r..(ib + 1) * q * r];
        let cm = &mut out[o * p * r..(o + 1) * p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = am[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..r {
                    cm[i * r + j] += aik * bm[k * r + j];
                }
            }
        }
    }
    Tensor::new(&shape, out)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_axis(shape: &[usize], axis: usize, what: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(HtvError::Dimension(format!(
            "{what}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Forward nearest-neighbour upsampling on plain tensors.
pub fn nearest_interpolate_values(x: &Tensor, axis: usize, target: usize) -> Result<Tensor> {
    check_axis(x.shape(), axis, "nearest_interpolate")?;
    let (outer, src_len, inner) = axis_split(x.shape(), axis);
    if target < src_len {
        return Err(HtvError::UnsupportedDownsample {
            from: src_len,
            to: target,
        });
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = target;
    let mut out = Vec::with_capacity(outer * target * inner);
    let d = x.data();
    for o in 0..outer {
        for j in 0..target {
            let s = nearest_source(j, src_len, target);
            out.extend_from_slice(&d[(o * src_len + s) * inner..(o * src_len + s + 1) * inner]);
        }
    }
    Tensor::new(&shape, out)
}

/// Adjoint of [`nearest_interpolate_values`]: every replica's value is summed
/// back into its source cell.
pub fn nearest_interpolate_adjoint(y: &Tensor, axis: usize, src_len: usize) -> Result<Tensor> {
    check_axis(y.shape(), axis, "nearest_interpolate_adjoint")?;
    let (outer, dst_len, inner) = axis_split(y.shape(), axis);
    if dst_len < src_len {
        return Err(HtvError::UnsupportedDownsample {
            from: src_len,
            to: dst_len,
        });
    }
    let mut shape = y.shape().to_vec();
    shape[axis] = src_len;
    let mut out = vec![0.0; outer * src_len * inner];
    for o in 0..outer {
        for j in 0..dst_len {
            let s = nearest_source(j, src_len, dst_len);
            for i in 0..inner {
                out[(o * src_len + s) * inner + i] += y.data()[(o * dst_len + j) * inner + i];
            }
        }
    }
    Tensor::new(&shape, out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t super::Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Reverse-mode sweep from this scalar. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn map_unary(&self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.id].value.map(f);
        self.tape.push(value, Op::Unary(kind, self.id))
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let mut out = vec![0.0; shape.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            if kind == BinaryKind::Div {
                if let Some(z) = bd.iter().find(|&&x| x == 0.0) {
                    return Err(HtvError::Domain(format!(
                        "division by {z}; guard the denominator with an epsilon"
                    )));
                }
            }
            for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
                out[o] = match kind {
                    BinaryKind::Add => ad[ia] + bd[ib],
                    BinaryKind::Sub => ad[ia] - bd[ib],
                    BinaryKind::Mul => ad[ia] * bd[ib],
                    BinaryKind::Div => ad[ia] / bd[ib],
                }
            });
            Tensor::new(&shape, out)?
        };
        Ok(self.tape.push(value, Op::Binary(kind, self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Fails with a domain error if any denominator element is exactly zero.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn neg(&self) -> Var<'t> {
        self.map_unary(UnaryKind::Neg, |x| -x)
    }

    pub fn exp(&self) -> Var<'t> {
        self.map_unary(UnaryKind::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(HtvError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map_unary(UnaryKind::Log, f64::ln))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map_unary(UnaryKind::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.map_unary(UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.map_unary(UnaryKind::Softplus, softplus)
    }

    pub fn square(&self) -> Var<'t> {
        self.map_unary(UnaryKind::Square, |x| x * x)
    }

    /// Derivative is undefined at zero, so zero is rejected along with
    /// negatives.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(HtvError::Domain(format!("sqrt of non-positive value {bad}")));
        }
        Ok(self.map_unary(UnaryKind::Sqrt, f64::sqrt))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.id].value.map(|x| c * x);
        self.tape.push(value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.id].value.map(|x| x + c);
        self.tape.push(value, Op::Shift(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul_forward(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let s = x.shape();
            if s.len() < 2 {
                return Err(HtvError::Dimension(format!("transpose of rank-1 shape {s:?}")));
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            let mut out = vec![0.0; x.len()];
            for (batch, m) in x.data().chunks(r * c).enumerate() {
                let base = batch * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[base + j * r + i] = m[i * c + j];
                    }
                }
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.tape.push(value, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.id].value.sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over `axis`; with `keepdim` the axis stays with extent 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            check_axis(x.shape(), axis, "sum_axis")?;
            let (outer, n, inner) = axis_split(x.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let d = x.data();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * n + k) * inner + i];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            if keepdim || shape.len() == 1 {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.tape.push(value, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    /// Variance along `axis`; `biased` divides by the axis length, otherwise
    /// by length − 1.
    pub fn variance(&self, axis: usize, biased: bool, keepdim: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis(&shape, axis, "variance")?;
        let n = shape[axis];
        let denom = if biased { n } else { n.saturating_sub(1) };
        if denom == 0 {
            return Err(HtvError::Dimension(format!(
                "variance over axis {axis} of shape {shape:?} has no degrees of freedom"
            )));
        }
        let centered = self.sub(self.mean_axis(axis, true)?)?;
        Ok(centered.square().sum_axis(axis, keepdim)?.scale(1.0 / denom as f64))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            check_axis(x.shape(), axis, "softmax")?;
            let (outer, n, inner) = axis_split(x.shape(), axis);
            let d = x.data();
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for k in 0..n {
                        let e = (d[idx(k)] - m).exp();
                        out[idx(k)] = e;
                        s += e;
                    }
                    for k in 0..n {
                        out[idx(k)] /= s;
                    }
                }
            }
            Tensor::new(x.shape(), out)?
        };
        Ok(self.tape.push(value, Op::Softmax(self.id, axis)))
    }

    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            check_axis(x.shape(), axis, "slice")?;
            let (outer, total, inner) = axis_split(x.shape(), axis);
            if range.start >= range.end || range.end > total {
                return Err(HtvError::Dimension(format!(
                    "slice {range:?} out of bounds for axis {axis} of shape {:?}",
                    x.shape()
                )));
            }
            let n = range.end - range.start;
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let s = (o * total + range.start) * inner;
                out.extend_from_slice(&x.data()[s..s + n * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = n;
            Tensor::new(&shape, out)?
        };
        Ok(self.tape.push(value, Op::Slice(self.id, axis, range.start)))
    }

    pub fn nearest_interpolate(&self, axis: usize, target: usize) -> Result<Var<'t>> {
        let value = nearest_interpolate_values(&self.tape.nodes.borrow()[self.id].value, axis, target)?;
        Ok(self.tape.push(value, Op::Interpolate(self.id, axis)))
    }
}

pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| HtvError::Dimension("concat of zero tensors".into()))?;
    let tape = first.tape;
    let value = {
        let nodes = tape.nodes.borrow();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        check_axis(shapes[0], axis, "concat")?;
        for s in &shapes[1..] {
            let compatible = s.len() == shapes[0].len()
                && s.iter()
                    .zip(shapes[0])
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(HtvError::Dimension(format!(
                    "concat along axis {axis}: {:?} vs {s:?}",
                    shapes[0]
                )));
            }
        }
        let (outer, _, inner) = axis_split(shapes[0], axis);
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let n = s[axis] * inner;
                out.extend_from_slice(&nodes[p.id].value.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = shapes[0].to_vec();
        shape[axis] = total;
        Tensor::new(&shape, out)?
    };
    Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
}
