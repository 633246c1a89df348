//! Scaled dot-product multi-head attention over block-diagonal batches.

use std::sync::Arc;

use super::graph::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, gemm_into, MatRef, Tensor};

/// Rows of `q` are split into `batches` consecutive blocks of `q_len`
/// queries; rows of `k`/`v` into blocks of `k_len` keys. Queries of block
/// `b` attend only to keys of block `b`. `key_valid` masks individual keys
/// out of the softmax (padding).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batches: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_valid: Option<Arc<Vec<bool>>>,
}

impl AttentionLayout {
    /// Every query sees every key.
    pub fn dense(q_len: usize, k_len: usize) -> Self {
        Self { batches: 1, q_len, k_len, key_valid: None }
    }

    pub fn batched(batches: usize, q_len: usize, k_len: usize) -> Self {
        Self { batches, q_len, k_len, key_valid: None }
    }
}

const QUERY_CHUNK: usize = 256;

struct Dims {
    d: usize,
    dh: usize,
    heads: usize,
    scale: f64,
}

/// Softmax over one score row, honouring the key mask. A row without any
/// valid key becomes all zeros.
fn softmax_row(row: &mut [f64], valid: Option<&[bool]>) {
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in row.iter().enumerate() {
        if valid.is_none_or(|v| v[j]) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in row.iter_mut().enumerate() {
        if valid.is_none_or(|v| v[j]) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
}

fn head_view<'a>(data: &'a [f64], row0: usize, rows: usize, head: usize, dims: &Dims) -> MatRef<'a> {
    MatRef {
        data,
        offset: row0 * dims.d + head * dims.dh,
        rows,
        cols: dims.dh,
        row_stride: dims.d,
        col_stride: 1,
    }
}

/// Attention probabilities `softmax(Q_h K_h^T / sqrt(d/h))` for every
/// `(batch, head)`, laid out `[batches, heads, q_len, k_len]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize, layout: &AttentionLayout) -> Result<Tensor> {
    let dims = check(q, k, k, heads, layout)?;
    let (lq, lk) = (layout.q_len, layout.k_len);
    let mut probs = vec![0.0; layout.batches * heads * lq * lk];
    for b in 0..layout.batches {
        let valid = layout.key_valid.as_ref().map(|v| &v[b * lk..(b + 1) * lk]);
        for h in 0..heads {
            let block = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
            scores(q, k, b, h, 0, lq, layout, &dims, block);
            for row in block.chunks_mut(lk.max(1)) {
                softmax_row(row, valid);
            }
        }
    }
    Tensor::new([layout.batches, heads, lq, lk], probs)
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, layout: &AttentionLayout) -> Result<Dims> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return dim_err("attention operands must be [tokens, width] matrices");
    }
    let d = q.shape()[1];
    if k.shape()[1] != d || v.shape()[1] != d {
        return dim_err(format!("attention widths differ: q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("head count {heads} does not divide width {d}")));
    }
    if layout.k_len == 0 || k.shape()[0] == 0 {
        return Err(Error::EmptyKeys);
    }
    if q.shape()[0] != layout.batches * layout.q_len || k.shape()[0] != layout.batches * layout.k_len || v.shape()[0] != k.shape()[0] {
        return Err(Error::Layout(format!(
            "attention layout {}x({} q, {} k) does not match q {:?}, k {:?}, v {:?}",
            layout.batches,
            layout.q_len,
            layout.k_len,
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(mask) = &layout.key_valid {
        if mask.len() != k.shape()[0] {
            return Err(Error::Layout("key mask length differs from key count".into()));
        }
    }
    let dh = d / heads;
    Ok(Dims { d, dh, heads, scale: 1.0 / (dh as f64).sqrt() })
}

#[allow(clippy::too_many_arguments)]
fn scores(q: &Tensor, k: &Tensor, b: usize, h: usize, q0: usize, rows: usize, layout: &AttentionLayout, dims: &Dims, out: &mut [f64]) {
    let lk = layout.k_len;
    let qv = head_view(q.data(), b * layout.q_len + q0, rows, h, dims);
    let kv = head_view(k.data(), b * lk, lk, h, dims);
    gemm(rows, dims.dh, lk, dims.scale, qv, kv.t(), 0.0, out, lk);
}

impl<'g> Var<'g> {
    /// Multi-head attention on already-projected `q`, `k`, `v` (`[tokens, d]`).
    /// Heads are contiguous `d / heads` column blocks; outputs are
    /// concatenated back in the same order.
    pub fn attention(&self, k: &Var<'g>, v: &Var<'g>, heads: usize, layout: &AttentionLayout) -> Result<Var<'g>> {
        let dims = check(self.value(), k.value(), v.value(), heads, layout)?;
        let (q_t, k_t, v_t) = (self.value(), k.value(), v.value());
        let (lq, lk) = (layout.q_len, layout.k_len);
        let mut out = vec![0.0; q_t.numel()];
        let keep = self.graph().is_recording();
        let mut saved: Vec<f64> = if keep { vec![0.0; layout.batches * heads * lq * lk] } else { Vec::new() };
        let mut chunk = vec![0.0; QUERY_CHUNK.min(lq.max(1)) * lk];
        for b in 0..layout.batches {
            let valid = layout.key_valid.as_ref().map(|m| &m[b * lk..(b + 1) * lk]);
            for h in 0..heads {
                let mut q0 = 0;
                while q0 < lq {
                    let rows = QUERY_CHUNK.min(lq - q0);
                    let block: &mut [f64] = if keep {
                        let start = ((b * heads + h) * lq + q0) * lk;
                        &mut saved[start..start + rows * lk]
                    } else {
                        &mut chunk[..rows * lk]
                    };
                    scores(q_t, k_t, b, h, q0, rows, layout, &dims, block);
                    for row in block.chunks_mut(lk) {
                        softmax_row(row, valid);
                    }
                    let vv = head_view(v_t.data(), b * lk, lk, h, &dims);
                    gemm_into(
                        rows,
                        lk,
                        dims.dh,
                        1.0,
                        MatRef::dense(block, rows, lk),
                        vv,
                        0.0,
                        &mut out,
                        (b * lq + q0) * dims.d + h * dims.dh,
                        dims.d,
                    );
                    q0 += rows;
                }
            }
        }
        let value = Tensor::new(q_t.shape().to_vec(), out)?;
        let layout = layout.clone();
        Ok(self.graph().op(value, &[self, k, v], move |p, _, gy| {
            let (q, k, v) = (p[0], p[1], p[2]);
            let mut gq = vec![0.0; q.numel()];
            let mut gk = vec![0.0; k.numel()];
            let mut gv = vec![0.0; v.numel()];
            let mut dp = vec![0.0; lq * lk];
            for b in 0..layout.batches {
                for h in 0..dims.heads {
                    let probs = &saved[(b * dims.heads + h) * lq * lk..(b * dims.heads + h + 1) * lq * lk];
                    let go = head_view(gy.data(), b * lq, lq, h, &dims);
                    let pm = MatRef::dense(probs, lq, lk);
                    // dV = P^T dO
                    gemm_into(lk, lq, dims.dh, 1.0, pm.t(), go, 1.0, &mut gv, b * lk * dims.d + h * dims.dh, dims.d);
                    // dP = dO V^T
                    let vv = head_view(v.data(), b * lk, lk, h, &dims);
                    gemm(lq, dims.dh, lk, 1.0, go, vv.t(), 0.0, &mut dp, lk);
                    for i in 0..lq {
                        let prow = &probs[i * lk..(i + 1) * lk];
                        let drow = &mut dp[i * lk..(i + 1) * lk];
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot);
                        }
                    }
                    let ds = MatRef::dense(&dp, lq, lk);
                    let kv = head_view(k.data(), b * lk, lk, h, &dims);
                    let qv = head_view(q.data(), b * lq, lq, h, &dims);
                    gemm_into(lq, lk, dims.dh, dims.scale, ds, kv, 1.0, &mut gq, b * lq * dims.d + h * dims.dh, dims.d);
                    gemm_into(lk, lq, dims.dh, dims.scale, ds.t(), qv, 1.0, &mut gk, b * lk * dims.d + h * dims.dh, dims.d);
                }
            }
            vec![
                Some(Tensor::new(q.shape().to_vec(), gq).unwrap()),
                Some(Tensor::new(k.shape().to_vec(), gk).unwrap()),
                Some(Tensor::new(v.shape().to_vec(), gv).unwrap()),
            ]
        }))
    }
}
