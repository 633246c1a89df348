#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stp4d::nn::{gradient_check, Bindings, GradCheckOptions, Graph, Linear, MultiHeadAttention, ParameterStore, Var};
use stp4d::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
        }
    }
    c
}

/// `x W + b` for row-major `x: [m, k]`, `W: [k, n]`.
pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let m = x.len() / k;
    let mut y = naive_matmul(x, w.data(), m, k, n);
    for (i, v) in y.iter_mut().enumerate() {
        *v += b.data()[i % n];
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParameterStore, seed: u64, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, rand_tensor(&shape, seed.wrapping_add(i as u64 * 7919), scale)).unwrap();
    }
}

pub fn check(store: &ParameterStore, f: impl for<'g> Fn(&'g Graph, &Bindings<'g>) -> stp4d::Result<Var<'g>>, tol: f64) {
    let r = gradient_check(store, f, &GradCheckOptions { h: 1e-5, tol, max_entries: Some(24), seed: 0 }).unwrap();
    assert!(r.passed(), "{:?}", r.worst());
}

/// Multiplies every attention query/key projection by `factor`. Near-uniform
/// softmax weights leave those parameters with gradients close to the
/// finite-difference noise floor.
pub fn sharpen_attention(store: &mut ParameterStore, factor: f64) {
    let names: Vec<String> = store.names().filter(|n| n.contains(".q.") || n.contains(".k.")).map(str::to_string).collect();
    for n in names {
        let mut t = store.get(&n).unwrap().clone();
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
        store.set(&n, t).unwrap();
    }
}

pub fn lin(store: &ParameterStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    affine(x, store.get(&l.weight).unwrap(), store.get(&l.bias).unwrap())
}

/// Multi-head attention where query `i` may see key `j` iff `allowed(i, j)`.
pub fn mha(store: &ParameterStore, m: &MultiHeadAttention, q_in: &[f64], kv_in: &[f64], d: usize, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let (q, k, v) = (lin(store, &m.q, q_in), lin(store, &m.k, kv_in), lin(store, &m.v, kv_in));
    let (nq, nk, dh) = (q.len() / d, k.len() / d, d / heads);
    let mut ctx = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let keys: Vec<usize> = (0..nk).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            for (wj, &j) in softmax(&scores).iter().zip(&keys) {
                for c in 0..dh {
                    ctx[i * d + h * dh + c] += wj * v[j * d + h * dh + c];
                }
            }
        }
    }
    lin(store, &m.out, &ctx)
}
