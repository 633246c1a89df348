//! Differentiable primitives on [`Var`].

use std::sync::Arc;

use super::graph::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, axis, inner)` extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g> Var<'g> {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let value = self.value().map(f);
        self.graph().op(value, &[self], move |p, y, gy| {
            let x = p[0].data();
            let data = x
                .iter()
                .zip(y.data())
                .zip(gy.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(p[0].shape().to_vec(), data).unwrap())]
        })
    }

    fn binary(
        &self,
        other: &Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var<'g>> {
        let value = self.value().zip_map(other.value(), f)?;
        Ok(self.graph().op(value, &[self, other], move |p, _, gy| {
            let n = gy.numel();
            let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (da, db) = df(p[0].data()[i], p[1].data()[i], gy.data()[i]);
                ga[i] = da;
                gb[i] = db;
            }
            let shape = gy.shape().to_vec();
            vec![Some(Tensor::new(shape.clone(), ga).unwrap()), Some(Tensor::new(shape, gb).unwrap())]
        }))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.graph().op(Tensor::scalar(s), &[self], |p, _, gy| {
            vec![Some(Tensor::full(p[0].shape().to_vec(), gy.item()))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the last axis, removing it.
    pub fn sum_last(&self) -> Var<'g> {
        let x = self.value();
        let d = x.last_dim();
        let rows = x.rows();
        let data: Vec<f64> = (0..rows).map(|r| x.data()[r * d..(r + 1) * d].iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        self.graph().op(Tensor::new(shape, data).unwrap(), &[self], move |p, _, gy| {
            let mut g = vec![0.0; rows * d];
            for r in 0..rows {
                g[r * d..(r + 1) * d].fill(gy.data()[r]);
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), g).unwrap())]
        })
    }

    /// `x[..., d] + b[d]`.
    pub fn add_row(&self, b: &Var<'g>) -> Result<Var<'g>> {
        let d = self.value().last_dim();
        if b.shape() != [d] {
            return dim_err(format!("add_row: bias {:?} for last axis {d}", b.shape()));
        }
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, bb) in row.iter_mut().zip(b.value().data()) {
                *v += bb;
            }
        }
        Ok(self.graph().op(out, &[self, b], move |_, _, gy| {
            let mut gb = vec![0.0; d];
            for row in gy.data().chunks(d) {
                for (acc, g) in gb.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            vec![Some(gy.clone()), Some(Tensor::new([d], gb).unwrap())]
        }))
    }

    /// `x[..., d] * g[d]`.
    pub fn mul_row(&self, g: &Var<'g>) -> Result<Var<'g>> {
        let d = self.value().last_dim();
        if g.shape() != [d] {
            return dim_err(format!("mul_row: scale {:?} for last axis {d}", g.shape()));
        }
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, s) in row.iter_mut().zip(g.value().data()) {
                *v *= s;
            }
        }
        Ok(self.graph().op(out, &[self, g], move |p, _, gy| {
            let (x, s) = (p[0].data(), p[1].data());
            let mut gx = vec![0.0; x.len()];
            let mut gs = vec![0.0; d];
            for (r, row) in gy.data().chunks(d).enumerate() {
                for j in 0..d {
                    gx[r * d + j] = row[j] * s[j];
                    gs[j] += row[j] * x[r * d + j];
                }
            }
            vec![
                Some(Tensor::new(p[0].shape().to_vec(), gx).unwrap()),
                Some(Tensor::new([d], gs).unwrap()),
            ]
        }))
    }

    /// Multiplies every element by a rank-0 variable.
    pub fn mul_scalar(&self, s: &Var<'g>) -> Result<Var<'g>> {
        if s.value().numel() != 1 {
            return dim_err("mul_scalar expects a single-element multiplier");
        }
        let c = s.item();
        let out = self.value().map(|x| x * c);
        Ok(self.graph().op(out, &[self, s], |p, _, gy| {
            let c = p[1].item();
            let gs: f64 = gy.data().iter().zip(p[0].data()).map(|(g, x)| g * x).sum();
            vec![Some(gy.map(|g| g * c)), Some(Tensor::new(p[1].shape().to_vec(), vec![gs]).unwrap())]
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = self.value().matmul(other.value())?;
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        Ok(self.graph().op(value, &[self, other], move |p, _, gy| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, 1.0, MatRef::dense(gy.data(), m, n), MatRef::dense(p[1].data(), k, n).t(), 0.0, &mut ga, k);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, 1.0, MatRef::dense(p[0].data(), m, k).t(), MatRef::dense(gy.data(), m, n), 0.0, &mut gb, n);
            vec![Some(Tensor::new([m, k], ga).unwrap()), Some(Tensor::new([k, n], gb).unwrap())]
        }))
    }

    /// Affine map `x W + b` over the last axis; `W` is `[in, out]`.
    pub fn linear(&self, w: &Var<'g>, b: Option<&Var<'g>>) -> Result<Var<'g>> {
        let x = self.value();
        if w.value().rank() != 2 || x.last_dim() != w.shape()[0] {
            return dim_err(format!("linear: input {:?} against weight {:?}", x.shape(), w.shape()));
        }
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        if let Some(b) = b {
            if b.shape() != [dout] {
                return dim_err(format!("linear: bias {:?} for output width {dout}", b.shape()));
            }
        }
        let rows = x.rows();
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b.value().data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, din, dout, 1.0, MatRef::dense(x.data(), rows, din), MatRef::dense(w.value().data(), din, dout), beta, &mut out, dout);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        let backward = move |p: &[&Tensor], _: &Tensor, gy: &Tensor| {
            let mut gx = vec![0.0; rows * din];
            gemm(rows, dout, din, 1.0, MatRef::dense(gy.data(), rows, dout), MatRef::dense(p[1].data(), din, dout).t(), 0.0, &mut gx, din);
            let mut gw = vec![0.0; din * dout];
            gemm(din, rows, dout, 1.0, MatRef::dense(p[0].data(), rows, din).t(), MatRef::dense(gy.data(), rows, dout), 0.0, &mut gw, dout);
            let mut grads = vec![
                Some(Tensor::new(p[0].shape().to_vec(), gx).unwrap()),
                Some(Tensor::new([din, dout], gw).unwrap()),
            ];
            if p.len() == 3 {
                let mut gb = vec![0.0; dout];
                for row in gy.data().chunks(dout) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                grads.push(Some(Tensor::new([dout], gb).unwrap()));
            }
            grads
        };
        Ok(match b {
            Some(b) => self.graph().op(value, &[self, w, b], backward),
            None => self.graph().op(value, &[self, w], backward),
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.graph().op(value, &[self], |p, _, gy| {
            vec![Some(gy.clone().reshape(p[0].shape().to_vec()).unwrap())]
        }))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let value = self.value().transpose2()?;
        Ok(self.graph().op(value, &[self], |_, _, gy| vec![Some(gy.transpose2().unwrap())]))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!("invalid permutation {axes:?} for shape {shape:?}"));
        }
        let value = permute_tensor(self.value(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.graph().op(value, &[self], move |_, _, gy| vec![Some(permute_tensor(gy, &inverse))]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return dim_err(format!("narrow axis {axis} [{start}, {}) of {shape:?}", start + len));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&x[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.graph().op(Tensor::new(out_shape, out)?, &[self], move |_, _, gy| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = o * n * inner;
                g[base + start * inner..base + (start + len) * inner]
                    .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), g).unwrap())]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base_shape = first.shape().to_vec();
        if axis >= base_shape.len() {
            return dim_err(format!("concat axis {axis} for rank {}", base_shape.len()));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != base_shape.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base_shape[i]) {
                return dim_err(format!("concat: {s:?} incompatible with {base_shape:?} on axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let graph = first.graph();
        Ok(graph.op(Tensor::new(out_shape, out)?, parts, move |p, _, gy| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&gy.data()[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(g, t)| Some(Tensor::new(t.shape().to_vec(), g).unwrap()))
                .collect()
        }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return dim_err(format!("mean over axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let x = self.value().data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &x[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.graph().op(Tensor::new(out_shape, out)?, &[self], move |_, _, gy| {
            let mut g = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for a in 0..n {
                    for i in 0..inner {
                        g[(o * n + a) * inner + i] = gy.data()[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), g).unwrap())]
        }))
    }

    /// Row gather on a `[n, d]` matrix; `None` yields a zero row.
    pub fn gather_rows(&self, index: Arc<Vec<Option<usize>>>) -> Result<Var<'g>> {
        if self.value().rank() != 2 {
            return dim_err(format!("gather_rows on {:?}", self.shape()));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return dim_err(format!("gather index {bad} out of range {n}"));
        }
        let x = self.value().data();
        let mut out = vec![0.0; index.len() * d];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[r * d..(r + 1) * d].copy_from_slice(&x[s * d..(s + 1) * d]);
            }
        }
        let m = index.len();
        Ok(self.graph().op(Tensor::new([m, d], out)?, &[self], move |_, _, gy| {
            let mut g = vec![0.0; n * d];
            for (r, src) in index.iter().enumerate() {
                if let Some(s) = src {
                    for j in 0..d {
                        g[s * d + j] += gy.data()[r * d + j];
                    }
                }
            }
            vec![Some(Tensor::new([n, d], g).unwrap())]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let d = x.last_dim();
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return dim_err(format!("layer_norm: input {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (gamma.value().data(), beta.value().data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &h)| h * g[i % d] + b[i % d]).collect();
        let shape = x.shape().to_vec();
        Ok(self.graph().op(Tensor::new(shape.clone(), out)?, &[self, gamma, beta], move |p, _, gy| {
            let g = p[1].data();
            let gy = gy.data();
            let mut gx = vec![0.0; rows * d];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..d {
                    let i = r * d + j;
                    let dh = gy[i] * g[j];
                    m1 += dh;
                    m2 += dh * xhat[i];
                    gg[j] += gy[i] * xhat[i];
                    gb[j] += gy[i];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let i = r * d + j;
                    gx[i] = inv_std[r] * (gy[i] * g[j] - m1 - xhat[i] * m2);
                }
            }
            vec![
                Some(Tensor::new(shape.clone(), gx).unwrap()),
                Some(Tensor::new([d], gg).unwrap()),
                Some(Tensor::new([d], gb).unwrap()),
            ]
        }))
    }

    /// Scales each last-axis row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_last(&self) -> Result<Var<'g>> {
        let x = self.value();
        let d = x.last_dim();
        let rows = x.rows();
        let mut norms = vec![0.0; rows];
        for (r, n) in norms.iter_mut().enumerate() {
            *n = x.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if *n == 0.0 || !n.is_finite() {
                return Err(Error::Normalization(format!("row {r} has norm {n}")));
            }
        }
        let out: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v / norms[i / d]).collect();
        Ok(self.graph().op(Tensor::new(x.shape().to_vec(), out)?, &[self], move |p, y, gy| {
            let (y, gy) = (y.data(), gy.data());
            let mut g = vec![0.0; rows * d];
            for r in 0..rows {
                let s = r * d;
                let dot: f64 = (0..d).map(|j| y[s + j] * gy[s + j]).sum();
                for j in 0..d {
                    g[s + j] = (gy[s + j] - y[s + j] * dot) / norms[r];
                }
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), g).unwrap())]
        }))
    }

    /// Trace of a square matrix.
    pub fn trace(&self) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != s[1] {
            return dim_err(format!("trace of {s:?}"));
        }
        let n = s[0];
        let tr: f64 = (0..n).map(|i| self.value().data()[i * n + i]).sum();
        Ok(self.graph().op(Tensor::scalar(tr), &[self], move |_, _, gy| {
            let mut g = Tensor::zeros([n, n]);
            for i in 0..n {
                g.data_mut()[i * n + i] = gy.item();
            }
            vec![Some(g)]
        }))
    }
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(x.data()[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}
