//! Differentiable operations on [`Var`].
//!
//! Binary elementwise ops accept either matching shapes or one operand with a
//! single element; any other broadcast must go through [`Var::broadcast_to`].

use std::rc::Rc;

use super::tensor::axis_split;
use super::{special, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if a.is_scalar() && !(b.is_scalar() && b.rank() < a.rank()) {
        Ok(Bcast::LhsScalar)
    } else if b.is_scalar() {
        Ok(Bcast::RhsScalar)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

/// Reduces `g` to the shape of `like` (sum when `like` is a broadcast scalar).
fn reduce_to(g: Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g
    } else {
        Tensor::from_parts(like.shape().to_vec(), vec![g.sum()])
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the caller guarantees `a` covers an m x k view and `b` a k x n
    // view under the given strides; `c` is a dense row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Option<Vec<f64>> {
    let n = a.rows();
    let d = a.data();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = d[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn spd_inverse(a: &Tensor, op: &'static str) -> Result<(Tensor, Vec<f64>)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::shape(op, a.shape(), &[]));
    }
    let n = a.rows();
    let l = cholesky(a).ok_or_else(|| Error::domain(op, "matrix is not positive definite"))?;
    // Invert L by forward substitution, then A^-1 = L^-T L^-1.
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i.max(j)..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Ok((Tensor::from_parts(vec![n, n], inv), l))
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let mode = bcast(op, &a, &b)?;
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Bcast::Same => (
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::LhsScalar => {
                let x = a.data()[0];
                (b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
            }
            Bcast::RhsScalar => {
                let y = b.data()[0];
                (a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.push_op(out, &[self, other], move |g, needs| {
            let n = g.numel();
            let at = |i: usize| if mode == Bcast::LhsScalar { a.data()[0] } else { a.data()[i] };
            let bt = |i: usize| if mode == Bcast::RhsScalar { b.data()[0] } else { b.data()[i] };
            let ga = needs[0].then(|| {
                let d: Vec<f64> = (0..n).map(|i| g.data()[i] * da(at(i), bt(i))).collect();
                reduce_to(Tensor::from_parts(g.shape().to_vec(), d), &a)
            });
            let gb = needs[1].then(|| {
                let d: Vec<f64> = (0..n).map(|i| g.data()[i] * db(at(i), bt(i))).collect();
                reduce_to(Tensor::from_parts(g.shape().to_vec(), d), &b)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Elementwise map with derivative expressed through input `x` and output `y`.
    fn unary(self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.push_op((*y).clone(), &[self], move |g, _| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(yc.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        })
    }

    /// Elementwise op whose output and local derivative were computed by the
    /// caller.
    pub(crate) fn elementwise_custom(self, out: Vec<f64>, local: Vec<f64>) -> Var<'t> {
        let shape = self.shape();
        debug_assert_eq!(out.len(), local.len());
        self.tape
            .push_op(Tensor::from_parts(shape, out), &[self], move |g, _| {
                let d = g.data().iter().zip(&local).map(|(a, b)| a * b).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v + c);
        self.tape.push_op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * c);
        self.tape
            .push_op(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log; `log(0) = -inf` is permitted, negative inputs are not.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(v) = self.value().data().iter().find(|v| **v < 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("argument {v}")));
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(v) = self.value().data().iter().find(|v| **v < 0.0 || v.is_nan()) {
            return Err(Error::domain("sqrt", format!("argument {v}")));
        }
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(special::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(special::softplus, |x, _| special::sigmoid(x))
    }

    /// `log sigmoid(x) = -softplus(-x)`, stable for large |x|.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(|x| -special::softplus(-x), |x, _| special::sigmoid(-x))
    }

    /// Absolute value; the derivative at 0 follows `sign(0) = +1`.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.clamp(lo, hi));
        self.tape.push_op(out, &[self], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gi, &xi)| if xi < lo || xi > hi { 0.0 } else { gi })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        })
    }

    /// `log Phi(x)` for the standard normal CDF.
    pub fn log_ndtr(self) -> Var<'t> {
        self.unary(special::log_ndtr, |x, y| {
            (special::log_normal_pdf(x) - y).exp()
        })
    }

    /// Elementwise floor, treated as piecewise constant (zero gradient).
    pub fn floor(self) -> Var<'t> {
        self.tape.constant(self.value().map(f64::floor))
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let old = x.shape().to_vec();
        Ok(self.tape.push_op(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(old.clone(), g.data().to_vec()))]
        }))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push_op(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self
            .tape
            .push_op(Tensor::from_parts(shape, out), &[self], move |g, _| {
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.value().shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }

    /// Numerically stable `log sum exp` along `axis`, removing it.
    pub fn logsumexp_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("logsumexp_axis", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x.data()[(o * len + j) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..len).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let y = Rc::new(Tensor::from_parts(shape, out));
        let yc = y.clone();
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push_op((*y).clone(), &[self], move |g, _| {
            let mut d = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let lse = yc.data()[o * inner + i];
                    let gi = g.data()[o * inner + i];
                    for j in 0..len {
                        let k = (o * len + j) * inner + i;
                        d[k] = gi * (x.data()[k] - lse).exp();
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), d))]
        }))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut kept = shape.clone();
        kept[axis] = 1;
        let lse = self.logsumexp_axis(axis)?.reshape(&kept)?.broadcast_to(&shape)?;
        self.sub(lse)
    }

    /// Expands size-1 axes (or a single-element tensor) to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() == shape {
            return Ok(self);
        }
        let src: Vec<usize> = if x.is_scalar() {
            vec![1; shape.len()]
        } else if x.rank() == shape.len() {
            x.shape().to_vec()
        } else {
            return Err(Error::shape("broadcast_to", x.shape(), shape));
        };
        for (s, t) in src.iter().zip(shape) {
            if *s != 1 && s != t {
                return Err(Error::shape("broadcast_to", x.shape(), shape));
            }
        }
        // Source index for every output element.
        let numel: usize = shape.iter().product();
        let mut src_strides = vec![0usize; src.len()];
        let mut acc = 1;
        for k in (0..src.len()).rev() {
            src_strides[k] = if src[k] == 1 { 0 } else { acc };
            acc *= src[k];
        }
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum::<usize>());
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        let data: Vec<f64> = map.iter().map(|&i| x.data()[i]).collect();
        let in_shape = x.shape().to_vec();
        let in_numel = x.numel();
        Ok(self.tape.push_op(
            Tensor::from_parts(shape.to_vec(), data),
            &[self],
            move |g, _| {
                let mut d = vec![0.0; in_numel];
                for (gi, &i) in g.data().iter().zip(&map) {
                    d[i] += gi;
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            },
        ))
    }

    /// `[d] -> [n, d]` by repeating the row.
    pub fn expand_rows(self, n: usize) -> Result<Var<'t>> {
        let d = self.value().numel();
        self.reshape(&[1, d])?.broadcast_to(&[n, d])
    }

    /// `[n] -> [n, d]` by repeating each entry along the row.
    pub fn expand_cols(self, d: usize) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n, 1])?.broadcast_to(&[n, d])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut c);
        Ok(self.tape.push_op(
            Tensor::from_parts(vec![m, n], c),
            &[self, other],
            move |g, needs| {
                // dA = G B^T, dB = A^T G
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self
            .tape
            .push_op(out, &[self], |g, _| vec![Some(g.transpose().expect("rank 2"))]))
    }

    /// `x W + b` with `x: [n, k]`, `W: [k, m]`, `b: [m]` added to every row.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        if x.rank() != 2 || wv.rank() != 2 || x.shape()[1] != wv.shape()[0] {
            return Err(Error::shape("affine", x.shape(), wv.shape()));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], wv.shape()[1]);
        if bv.numel() != m {
            return Err(Error::shape("affine", wv.shape(), bv.shape()));
        }
        let mut c = vec![0.0; n * m];
        gemm(n, k, m, x.data(), (k as isize, 1), wv.data(), (m as isize, 1), &mut c);
        for row in c.chunks_mut(m.max(1)) {
            for (v, bi) in row.iter_mut().zip(bv.data()) {
                *v += bi;
            }
        }
        let b_shape = bv.shape().to_vec();
        Ok(self.tape.push_op(
            Tensor::from_parts(vec![n, m], c),
            &[self, w, b],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (m as isize, 1), wv.data(), (1, m as isize), &mut d);
                    Tensor::from_parts(vec![n, k], d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![0.0; k * m];
                    gemm(k, n, m, x.data(), (1, k as isize), g.data(), (m as isize, 1), &mut d);
                    Tensor::from_parts(vec![k, m], d)
                });
                let gb = needs[2].then(|| {
                    let mut d = vec![0.0; m];
                    for row in g.data().chunks(m.max(1)) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(b_shape.clone(), d)
                });
                vec![gx, gw, gb]
            },
        ))
    }

    /// Picks `out[o, j, i] = x[o, idx[o, j, i], i]`, where `idx` has the
    /// output shape (axis extent `m`).
    pub fn gather(self, axis: usize, idx: &[usize], m: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("gather", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        if idx.len() != outer * m * inner {
            return Err(Error::shape("gather", x.shape(), &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::domain("gather", format!("index {bad} out of range {len}")));
        }
        let mut out = vec![0.0; idx.len()];
        for o in 0..outer {
            for j in 0..m {
                for i in 0..inner {
                    let k = (o * m + j) * inner + i;
                    out[k] = x.data()[(o * len + idx[k]) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        let in_shape = x.shape().to_vec();
        let idx = idx.to_vec();
        Ok(self
            .tape
            .push_op(Tensor::from_parts(shape, out), &[self], move |g, _| {
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..m {
                        for i in 0..inner {
                            let k = (o * m + j) * inner + i;
                            d[(o * len + idx[k]) * inner + i] += g.data()[k];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }))
    }

    /// Inverse of [`Var::gather`]: writes `x[o, j, i]` to position
    /// `idx[o, j, i]` of a zero tensor with axis extent `len`; duplicates add.
    pub fn scatter(self, axis: usize, idx: &[usize], len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("scatter", x.shape(), &[axis]));
        }
        let (outer, m, inner) = axis_split(x.shape(), axis);
        if idx.len() != x.numel() {
            return Err(Error::shape("scatter", x.shape(), &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::domain("scatter", format!("index {bad} out of range {len}")));
        }
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for j in 0..m {
                for i in 0..inner {
                    let k = (o * m + j) * inner + i;
                    out[(o * len + idx[k]) * inner + i] += x.data()[k];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        let idx = idx.to_vec();
        Ok(self
            .tape
            .push_op(Tensor::from_parts(shape, out), &[self], move |g, _| {
                let mut d = vec![0.0; outer * m * inner];
                for o in 0..outer {
                    for j in 0..m {
                        for i in 0..inner {
                            let k = (o * m + j) * inner + i;
                            d[k] = g.data()[(o * len + idx[k]) * inner + i];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), d))]
            }))
    }

    /// Maximum along `axis` (axis removed) and the argmax per lane. Ties go
    /// to the lowest index.
    pub fn max_along_axis(self, axis: usize) -> Result<(Var<'t>, Vec<usize>)> {
        let x = self.value();
        if axis >= x.rank() || x.shape()[axis] == 0 {
            return Err(Error::shape("max_along_axis", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut idx = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if x.data()[(o * len + j) * inner + i] > x.data()[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                idx[o * inner + i] = best;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let picked = self.gather(axis, &idx, 1)?.reshape(&shape)?;
        Ok((picked, idx))
    }

    /// Ascending stable sort along `axis`. The returned permutation has the
    /// output shape: entry `j` of a lane is the source index of the `j`-th
    /// smallest element, so `sorted = gather(x, perm)`.
    pub fn sort_along_axis(self, axis: usize) -> Result<(Var<'t>, Vec<usize>)> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("sort_along_axis", x.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut perm = vec![0usize; x.numel()];
        let mut lane: Vec<usize> = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                lane.clear();
                lane.extend(0..len);
                let at = |j: usize| x.data()[(o * len + j) * inner + i];
                lane.sort_by(|&p, &q| at(p).total_cmp(&at(q)));
                for (j, &src) in lane.iter().enumerate() {
                    perm[(o * len + j) * inner + i] = src;
                }
            }
        }
        let sorted = self.gather(axis, &perm, len)?;
        Ok((sorted, perm))
    }

    /// Slices along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let x = self.value();
        if axis >= x.rank() || sizes.iter().sum::<usize>() != x.shape()[axis] {
            return Err(Error::shape("split", x.shape(), sizes));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut pieces = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &size in sizes {
            let mut out = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                out.extend_from_slice(&x.data()[base..base + size * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = size;
            let in_shape = x.shape().to_vec();
            let offset = start;
            pieces.push(self.tape.push_op(
                Tensor::from_parts(shape, out),
                &[self],
                move |g, _| {
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let base = (o * len + offset) * inner;
                        d[base..base + size * inner]
                            .copy_from_slice(&g.data()[o * size * inner..(o + 1) * size * inner]);
                    }
                    vec![Some(Tensor::from_parts(in_shape.clone(), d))]
                },
            ));
            start += size;
        }
        Ok(pieces)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let ref_shape = values[0].shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape("concat", &ref_shape, &[axis]));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != ref_shape.len()
                || s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .any(|(k, (a, b))| k != axis && a != b)
            {
                return Err(Error::shape("concat", &ref_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&ref_shape, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = ref_shape.clone();
        shape[axis] = total;
        Ok(tape.push_op(Tensor::from_parts(shape, out), parts, move |g, needs| {
            let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for (p, &s) in sizes.iter().enumerate() {
                if needs[p] {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + s * inner]);
                    }
                    let mut sh = ref_shape.clone();
                    sh[axis] = s;
                    grads.push(Some(Tensor::from_parts(sh, d)));
                } else {
                    grads.push(None);
                }
                offset += s;
            }
            grads
        }))
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn inv_spd(self) -> Result<Var<'t>> {
        let (inv, _) = spd_inverse(&self.value(), "inv_spd")?;
        let y = Rc::new(inv);
        let yc = y.clone();
        Ok(self.tape.push_op((*y).clone(), &[self], move |g, _| {
            // d(A^-1) = -A^-1 dA A^-1, so dL/dA = -Y^T G Y^T with Y symmetric.
            let n = yc.rows();
            let mut t = vec![0.0; n * n];
            gemm(n, n, n, yc.data(), (n as isize, 1), g.data(), (n as isize, 1), &mut t);
            let mut d = vec![0.0; n * n];
            gemm(n, n, n, &t, (n as isize, 1), yc.data(), (n as isize, 1), &mut d);
            d.iter_mut().for_each(|v| *v = -*v);
            vec![Some(Tensor::from_parts(vec![n, n], d))]
        }))
    }

    /// `log det A` for symmetric positive definite `A`.
    pub fn logdet_spd(self) -> Result<Var<'t>> {
        let (inv, l) = spd_inverse(&self.value(), "logdet_spd")?;
        let n = inv.rows();
        let ld: f64 = (0..n).map(|i| 2.0 * l[i * n + i].ln()).sum();
        Ok(self.tape.push_op(Tensor::scalar(ld), &[self], move |g, _| {
            let s = g.data()[0];
            vec![Some(inv.map(|v| v * s))]
        }))
    }
}

impl Tape {
    /// Convenience: constant `n x d` matrix from rows.
    pub fn rows<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::from_rows(rows)?))
    }
}
