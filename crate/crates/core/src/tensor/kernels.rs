//! Forward kernels and adjoint rules for every recorded operation.

use rayon::prelude::*;

use super::{strides, Tensor, L2_NORM_EPS};
use crate::error::{Error, Result};

/// Work size (multiply-adds) above which matrix products split rows across
/// the rayon pool. Each output row is still reduced in a fixed order, so the
/// result does not depend on the thread count.
const PAR_MATMUL_WORK: usize = 1 << 18;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// One recorded operation. Leaves carry no computation.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Relu,
    Gelu,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Gather(Vec<usize>),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Matmul,
    InnerProduct,
    Softmax,
    LogSumExp,
    LayerNorm { eps: f64 },
    L2Normalize,
    Conv3d { stride: [usize; 3], padding: [usize; 3] },
    DynamicContract,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Transpose => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather(_) => "gather",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::Matmul => "matmul",
            Op::InnerProduct => "inner_product",
            Op::Softmax => "softmax",
            Op::LogSumExp => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize => "l2_normalize",
            Op::Conv3d { .. } => "conv3d",
            Op::DynamicContract => "dynamic_contract",
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = || inputs[0];
        match self {
            Op::Leaf => Err(Error::Usage("leaf nodes have no forward rule".into())),
            Op::Add => broadcast_binary("add", inputs[0], inputs[1], |a, b| Ok(a + b)),
            Op::Sub => broadcast_binary("sub", inputs[0], inputs[1], |a, b| Ok(a - b)),
            Op::Mul => broadcast_binary("mul", inputs[0], inputs[1], |a, b| Ok(a * b)),
            Op::Div => broadcast_binary("div", inputs[0], inputs[1], |a, b| {
                if b == 0.0 {
                    Err(Error::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    })
                } else {
                    Ok(a / b)
                }
            }),
            Op::Neg => Ok(x().map(|v| -v)),
            Op::Scale(c) => Ok(x().map(|v| v * c)),
            Op::AddScalar(c) => Ok(x().map(|v| v + c)),
            Op::Exp => Ok(x().map(f64::exp)),
            Op::Log => {
                if let Some(bad) = x().data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("log of non-positive value {bad}"),
                    });
                }
                Ok(x().map(f64::ln))
            }
            Op::Relu => Ok(x().map(|v| v.max(0.0))),
            Op::Gelu => Ok(x().map(gelu)),
            Op::Sigmoid => Ok(x().map(sigmoid)),
            Op::Clamp { lo, hi } => Ok(x().map(|v| v.clamp(*lo, *hi))),
            Op::Reshape(shape) => x().reshape(shape),
            Op::Permute(perm) => permute(x(), perm),
            Op::Transpose => {
                let t = x();
                if t.rank() != 2 {
                    return Err(Error::shape("transpose", t.shape(), &[]));
                }
                permute(t, &[1, 0])
            }
            Op::Concat { axis } => concat(inputs, *axis),
            Op::Slice { axis, start, end } => slice(x(), *axis, *start, *end),
            Op::Gather(idx) => {
                let t = x();
                let n = t.numel();
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(Error::shape("gather", t.shape(), &[bad]));
                }
                if idx.is_empty() {
                    return Err(Error::Usage("gather with no indices".into()));
                }
                Ok(Tensor::from_parts(
                    vec![idx.len()],
                    idx.iter().map(|&i| t.data()[i]).collect(),
                ))
            }
            Op::Sum => Ok(Tensor::scalar(x().sum())),
            Op::Mean => Ok(Tensor::scalar(x().sum() / x().numel() as f64)),
            Op::SumAxis(axis) => reduce_axis(x(), *axis, false),
            Op::MeanAxis(axis) => reduce_axis(x(), *axis, true),
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = matmul_dims(a, b)?;
                Ok(Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n)))
            }
            Op::InnerProduct => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() || a.rank() != 1 {
                    return Err(Error::shape("inner_product", a.shape(), b.shape()));
                }
                Ok(Tensor::scalar(dot(a.data(), b.data())))
            }
            Op::Softmax => Ok(last_axis_map(x(), softmax_into)),
            Op::LogSumExp => {
                let t = x();
                let n = *t
                    .shape()
                    .last()
                    .ok_or_else(|| Error::shape("logsumexp", t.shape(), &[]))?;
                let out_shape = t.shape()[..t.rank() - 1].to_vec();
                let data = t.data().chunks(n).map(logsumexp).collect();
                Ok(Tensor::from_parts(out_shape, data))
            }
            Op::LayerNorm { eps } => {
                let eps = *eps;
                Ok(last_axis_map(x(), |row, out| {
                    let (mean, inv) = moments(row, eps);
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = (v - mean) * inv;
                    }
                }))
            }
            Op::L2Normalize => Ok(last_axis_map(x(), |row, out| {
                let denom = dot(row, row).sqrt().max(L2_NORM_EPS);
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v / denom;
                }
            })),
            Op::Conv3d { stride, padding } => conv3d_forward(inputs[0], inputs[1], *stride, *padding),
            Op::DynamicContract => dynamic_contract_forward(inputs[0], inputs[1]),
        }
    }

    /// Vector-Jacobian products for each input flagged in `needs`.
    pub fn adjoint(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = || inputs[0];
        let unary = |g: Tensor| vec![Some(g)];
        let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| {
            let t = x();
            let data = t
                .data()
                .iter()
                .zip(output.data())
                .zip(grad.data())
                .map(|((&xv, &yv), &g)| f(xv, yv, g))
                .collect();
            vec![Some(Tensor::from_parts(t.shape().to_vec(), data))]
        };
        match self {
            Op::Leaf => Vec::new(),
            Op::Add => broadcast_adjoint(inputs, grad, needs, |_, _, g| (g, g)),
            Op::Sub => broadcast_adjoint(inputs, grad, needs, |_, _, g| (g, -g)),
            Op::Mul => broadcast_adjoint(inputs, grad, needs, |a, b, g| (g * b, g * a)),
            Op::Div => broadcast_adjoint(inputs, grad, needs, |a, b, g| (g / b, -g * a / (b * b))),
            Op::Neg => unary(grad.map(|g| -g)),
            Op::Scale(c) => unary(grad.map(|g| g * c)),
            Op::AddScalar(_) | Op::Reshape(_) => unary(Tensor::from_parts(x().shape().to_vec(), grad.data().to_vec())),
            Op::Exp => elementwise(&|_, y, g| g * y),
            Op::Log => elementwise(&|x, _, g| g / x),
            Op::Relu => elementwise(&|x, _, g| if x > 0.0 { g } else { 0.0 }),
            Op::Gelu => elementwise(&|x, _, g| g * gelu_grad(x)),
            Op::Sigmoid => elementwise(&|_, y, g| g * y * (1.0 - y)),
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                elementwise(&move |x, _, g| if x >= lo && x <= hi { g } else { 0.0 })
            }
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                unary(permute(grad, &inv).expect("inverse permutation is valid"))
            }
            Op::Transpose => unary(permute(grad, &[1, 0]).expect("rank checked in forward")),
            Op::Concat { axis } => {
                let mut out = Vec::with_capacity(inputs.len());
                let mut start = 0;
                for (t, &need) in inputs.iter().zip(needs) {
                    let end = start + t.shape()[*axis];
                    out.push(need.then(|| slice(grad, *axis, start, end).expect("concat slice")));
                    start = end;
                }
                out
            }
            Op::Slice { axis, start, end } => {
                let t = x();
                let mut g = Tensor::zeros(t.shape());
                let outer: usize = t.shape()[..*axis].iter().product();
                let inner: usize = t.shape()[axis + 1..].iter().product();
                let n = t.shape()[*axis];
                let w = end - start;
                for o in 0..outer {
                    let src = &grad.data()[o * w * inner..(o + 1) * w * inner];
                    let dst = &mut g.data_mut()[(o * n + start) * inner..(o * n + end) * inner];
                    dst.copy_from_slice(src);
                }
                unary(g)
            }
            Op::Gather(idx) => {
                let mut g = Tensor::zeros(x().shape());
                for (&i, &gv) in idx.iter().zip(grad.data()) {
                    g.data_mut()[i] += gv;
                }
                unary(g)
            }
            Op::Sum => unary(Tensor::full(x().shape(), grad.item())),
            Op::Mean => unary(Tensor::full(x().shape(), grad.item() / x().numel() as f64)),
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let t = x();
                let n = t.shape()[*axis];
                let scale = if matches!(self, Op::MeanAxis(_)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let inner: usize = t.shape()[axis + 1..].iter().product();
                let g = Tensor::from_fn(t.shape(), |i| {
                    let outer = i / (n * inner);
                    grad.data()[outer * inner + i % inner] * scale
                });
                unary(g)
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = matmul_dims(a, b).expect("shapes checked in forward");
                let da = needs[0].then(|| Tensor::from_parts(vec![m, k], matmul_a_bt(grad.data(), b.data(), m, n, k)));
                let db = needs[1].then(|| Tensor::from_parts(vec![k, n], matmul_at_b(a.data(), grad.data(), m, k, n)));
                vec![da, db]
            }
            Op::InnerProduct => {
                let g = grad.item();
                vec![
                    needs[0].then(|| inputs[1].map(|v| v * g)),
                    needs[1].then(|| inputs[0].map(|v| v * g)),
                ]
            }
            Op::Softmax => {
                let n = *output.shape().last().unwrap();
                let mut g = Tensor::zeros(output.shape());
                for ((y, gy), gx) in output
                    .data()
                    .chunks(n)
                    .zip(grad.data().chunks(n))
                    .zip(g.data_mut().chunks_mut(n))
                {
                    let s = dot(y, gy);
                    for ((o, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
                        *o = yi * (gi - s);
                    }
                }
                unary(g)
            }
            Op::LogSumExp => {
                let t = x();
                let n = *t.shape().last().unwrap();
                let mut g = Tensor::zeros(t.shape());
                for (r, (row, out)) in t.data().chunks(n).zip(g.data_mut().chunks_mut(n)).enumerate() {
                    let lse = output.data()[r];
                    let gr = grad.data()[r];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = gr * (v - lse).exp();
                    }
                }
                unary(g)
            }
            Op::LayerNorm { eps } => {
                let t = x();
                let n = *t.shape().last().unwrap();
                let mut g = Tensor::zeros(t.shape());
                for ((row, (y, gy)), gx) in t
                    .data()
                    .chunks(n)
                    .zip(output.data().chunks(n).zip(grad.data().chunks(n)))
                    .zip(g.data_mut().chunks_mut(n))
                {
                    let (_, inv) = moments(row, *eps);
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = dot(gy, y) / n as f64;
                    for ((o, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
                        *o = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                unary(g)
            }
            Op::L2Normalize => {
                let t = x();
                let n = *t.shape().last().unwrap();
                let mut g = Tensor::zeros(t.shape());
                for ((row, (y, gy)), gx) in t
                    .data()
                    .chunks(n)
                    .zip(output.data().chunks(n).zip(grad.data().chunks(n)))
                    .zip(g.data_mut().chunks_mut(n))
                {
                    let norm = dot(row, row).sqrt();
                    if norm > L2_NORM_EPS {
                        let s = dot(y, gy);
                        for ((o, &yi), &gi) in gx.iter_mut().zip(y).zip(gy) {
                            *o = (gi - yi * s) / norm;
                        }
                    } else {
                        for (o, &gi) in gx.iter_mut().zip(gy) {
                            *o = gi / L2_NORM_EPS;
                        }
                    }
                }
                unary(g)
            }
            Op::Conv3d { stride, padding } => {
                let (dx, dk) = conv3d_adjoint(inputs[0], inputs[1], grad, *stride, *padding, needs);
                vec![dx, dk]
            }
            Op::DynamicContract => {
                let (xt, w) = (inputs[0], inputs[1]);
                let p = xt.numel();
                let m = w.shape()[3];
                let xs = xt.data();
                let ws = w.data();
                let gz = grad.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; p];
                    for q in 0..p {
                        dx[p - 1 - q] = dot(&ws[q * m..(q + 1) * m], gz);
                    }
                    Tensor::from_parts(xt.shape().to_vec(), dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; p * m];
                    for q in 0..p {
                        let xv = xs[p - 1 - q];
                        for (o, &g) in dw[q * m..(q + 1) * m].iter_mut().zip(gz) {
                            *o = g * xv;
                        }
                    }
                    Tensor::from_parts(w.shape().to_vec(), dw)
                });
                vec![dx, dw]
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Mean and inverse standard deviation (population variance) of a row.
fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn last_axis_map(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let n = t.shape().last().copied().unwrap_or(1);
    let mut out = vec![0.0; t.numel()];
    for (row, o) in t.data().chunks(n).zip(out.chunks_mut(n)) {
        f(row, o);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Broadcasting for binary ops: the smaller operand's shape must be a
/// trailing suffix of the larger one (or a single element), so in row-major
/// order its index is the output index modulo its length.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (big, small) = if a.numel() >= b.numel() { (a, b) } else { (b, a) };
    if small.numel() == 1 || big.shape().ends_with(small.shape()) {
        Ok(big.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn broadcast_binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> Result<f64>) -> Result<Tensor> {
    let shape = broadcast_shape(op, a, b)?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let mut out = Vec::with_capacity(n);
    if na == n && nb == n {
        for (&x, &y) in ad.iter().zip(bd) {
            out.push(f(x, y)?);
        }
    } else {
        for i in 0..n {
            out.push(f(ad[i % na], bd[i % nb])?);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn broadcast_adjoint(
    inputs: &[&Tensor],
    grad: &Tensor,
    needs: &[bool],
    f: impl Fn(f64, f64, f64) -> (f64, f64),
) -> Vec<Option<Tensor>> {
    let (a, b) = (inputs[0], inputs[1]);
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let mut ga = needs[0].then(|| vec![0.0; na]);
    let mut gb = needs[1].then(|| vec![0.0; nb]);
    for (i, &g) in grad.data().iter().enumerate() {
        let (da, db) = f(ad[i % na], bd[i % nb], g);
        if let Some(ga) = ga.as_mut() {
            ga[i % na] += da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[i % nb] += db;
        }
    }
    vec![
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    ]
}

pub(crate) fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", t.shape(), perm));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let in_strides = strides(t.shape());
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(t.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", first.shape(), &[axis]));
    }
    let mut total = 0;
    for t in inputs {
        let ok = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
        total += t.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let w = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= t.rank() || start >= end || end > t.shape()[axis] {
        return Err(Error::shape("slice", t.shape(), &[axis, start, end]));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let n = t.shape()[axis];
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

fn reduce_axis(t: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape("reduce_axis", t.shape(), &[axis]));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let n = t.shape()[axis];
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let acc = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v;
            }
        }
        if mean {
            for a in acc.iter_mut() {
                *a /= n as f64;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

fn parallel(work: usize) -> bool {
    work >= PAR_MATMUL_WORK && rayon::current_num_threads() > 1
}

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, ci): (usize, &mut [f64])| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let row = |(i, ci): (usize, &mut [f64])| {
        let ai = &a[i * n..(i + 1) * n];
        for (p, cv) in ci.iter_mut().enumerate() {
            *cv = dot(ai, &b[p * n..(p + 1) * n]);
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · G[m×n]
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let row = |(p, cp): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, &gv) in cp.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *cv += av * gv;
            }
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

fn conv_geometry(x: &Tensor, k: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> Result<ConvGeom> {
    if x.rank() != 4 || k.rank() != 5 || k.shape()[1] != x.shape()[0] {
        return Err(Error::shape("conv3d", x.shape(), k.shape()));
    }
    if stride.contains(&0) {
        return Err(Error::Config("conv3d stride must be positive".into()));
    }
    let input = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let kernel = [k.shape()[2], k.shape()[3], k.shape()[4]];
    let mut output = [0; 3];
    for a in 0..3 {
        let span = input[a] + 2 * padding[a];
        if span < kernel[a] || !(span - kernel[a]).is_multiple_of(stride[a]) {
            return Err(Error::Config(format!(
                "conv3d axis {a}: extent {} with padding {} does not tile kernel {} at stride {}",
                input[a], padding[a], kernel[a], stride[a]
            )));
        }
        output[a] = (span - kernel[a]) / stride[a] + 1;
    }
    Ok(ConvGeom {
        cin: x.shape()[0],
        cout: k.shape()[0],
        input,
        kernel,
        output,
        stride,
        padding,
    })
}

impl ConvGeom {
    /// Calls `f(out_offset, in_offset, kernel_offset_without_channels)` for
    /// every in-bounds (output position, kernel tap) pair of one channel pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ih, il, id] = self.input;
        let [kh, kl, kd] = self.kernel;
        let [oh, ol, od] = self.output;
        for a in 0..oh {
            for b in 0..ol {
                for c in 0..od {
                    let out = (a * ol + b) * od + c;
                    for u in 0..kh {
                        let Some(x0) = (a * self.stride[0] + u).checked_sub(self.padding[0]) else {
                            continue;
                        };
                        if x0 >= ih {
                            continue;
                        }
                        for v in 0..kl {
                            let Some(x1) = (b * self.stride[1] + v).checked_sub(self.padding[1]) else {
                                continue;
                            };
                            if x1 >= il {
                                continue;
                            }
                            for w in 0..kd {
                                let Some(x2) = (c * self.stride[2] + w).checked_sub(self.padding[2]) else {
                                    continue;
                                };
                                if x2 >= id {
                                    continue;
                                }
                                f(out, (x0 * il + x1) * id + x2, (u * kl + v) * kd + w);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3d_forward(x: &Tensor, k: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> Result<Tensor> {
    let g = conv_geometry(x, k, stride, padding)?;
    let in_vol: usize = g.input.iter().product();
    let k_vol: usize = g.kernel.iter().product();
    let out_vol: usize = g.output.iter().product();
    let mut out = vec![0.0; g.cout * out_vol];
    for co in 0..g.cout {
        let o = &mut out[co * out_vol..(co + 1) * out_vol];
        for ci in 0..g.cin {
            let xs = &x.data()[ci * in_vol..(ci + 1) * in_vol];
            let ks = &k.data()[(co * g.cin + ci) * k_vol..(co * g.cin + ci + 1) * k_vol];
            g.for_each_tap(|oi, xi, ki| o[oi] += ks[ki] * xs[xi]);
        }
    }
    Ok(Tensor::from_parts(
        vec![g.cout, g.output[0], g.output[1], g.output[2]],
        out,
    ))
}

fn conv3d_adjoint(
    x: &Tensor,
    k: &Tensor,
    grad: &Tensor,
    stride: [usize; 3],
    padding: [usize; 3],
    needs: &[bool],
) -> (Option<Tensor>, Option<Tensor>) {
    let g = conv_geometry(x, k, stride, padding).expect("geometry checked in forward");
    let in_vol: usize = g.input.iter().product();
    let k_vol: usize = g.kernel.iter().product();
    let out_vol: usize = g.output.iter().product();
    let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
    let mut dk = needs[1].then(|| vec![0.0; k.numel()]);
    for co in 0..g.cout {
        let go = &grad.data()[co * out_vol..(co + 1) * out_vol];
        for ci in 0..g.cin {
            let kbase = (co * g.cin + ci) * k_vol;
            if let Some(dx) = dx.as_mut() {
                let ks = &k.data()[kbase..kbase + k_vol];
                let d = &mut dx[ci * in_vol..(ci + 1) * in_vol];
                g.for_each_tap(|oi, xi, ki| d[xi] += go[oi] * ks[ki]);
            }
            if let Some(dk) = dk.as_mut() {
                let xs = &x.data()[ci * in_vol..(ci + 1) * in_vol];
                let d = &mut dk[kbase..kbase + k_vol];
                g.for_each_tap(|oi, xi, ki| d[ki] += go[oi] * xs[xi]);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
    )
}

/// `z[m] = Σ_{h,l,d} w[h,l,d,m] · x[H-h-1, L-l-1, D-d-1]`.
///
/// Reversing all three indices of a row-major block reverses its flat
/// index, so the contraction pairs weight row `q` with `x[P-1-q]`.
pub(crate) fn dynamic_contract_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 || w.shape()[..3] != x.shape()[..] {
        return Err(Error::shape("dynamic_contract", x.shape(), w.shape()));
    }
    let p = x.numel();
    let m = w.shape()[3];
    let mut z = vec![0.0; m];
    for q in 0..p {
        let xv = x.data()[p - 1 - q];
        for (zv, &wv) in z.iter_mut().zip(&w.data()[q * m..(q + 1) * m]) {
            *zv += wv * xv;
        }
    }
    Ok(Tensor::from_parts(vec![m], z))
}
