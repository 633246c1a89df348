//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-6;
const RANK_TOL: f64 = 1e-10;

/// Sample mean and unbiased covariance of `[n, d]` rows. With one sample the
/// covariance is zero.
pub fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::Dimension(format!("feature set must be [n, d] with n ≥ 1, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = DVector::from_iterator(d, (0..d).map(|j| m.column(j).sum() / n as f64));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = if n > 1 { centered.transpose() * &centered / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
    Ok((mu, symmetrize(cov)))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Rank deficiency is decided structurally (too few samples) or by the
/// eigenvalue spread, and triggers `ε·I`.
pub fn regularize(cov: &DMatrix<f64>, samples: usize) -> (DMatrix<f64>, bool) {
    let d = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let deficient = samples <= d || min <= RANK_TOL * max || max <= 0.0;
    if deficient {
        (cov + DMatrix::identity(d, d) * EPSILON, true)
    } else {
        (cov.clone(), false)
    }
}

struct Sqrt {
    vectors: DMatrix<f64>,
    roots: DVector<f64>,
}

fn psd_sqrt(m: &DMatrix<f64>) -> Sqrt {
    let e = SymmetricEigen::new(symmetrize(m.clone()));
    Sqrt { vectors: e.eigenvectors, roots: e.eigenvalues.map(|v| v.max(0.0).sqrt()) }
}

impl Sqrt {
    fn matrix(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.roots) * self.vectors.transpose()
    }
}

/// `Tr((Σx^{1/2} Σy Σx^{1/2})^{1/2})` and its gradient with respect to `Σx`.
fn trace_sqrt_product(sx: &DMatrix<f64>, sy: &DMatrix<f64>, want_grad: bool) -> (f64, Option<DMatrix<f64>>) {
    let s = psd_sqrt(sx);
    let sm = s.matrix();
    let inner = symmetrize(&sm * sy * &sm);
    let e = SymmetricEigen::new(inner);
    let value: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    if !want_grad {
        return (value, None);
    }
    // d Tr(M^{1/2}) = ½ Tr(M^{-1/2} dM), M = S Σy S, then S² = Σx (Sylvester).
    let inv_half = DVector::from_iterator(
        e.eigenvalues.len(),
        e.eigenvalues.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }),
    );
    let m_inv_half = &e.eigenvectors * DMatrix::from_diagonal(&inv_half) * e.eigenvectors.transpose();
    let a = sy * &sm * &m_inv_half;
    let g_s = (&a + a.transpose()) * 0.5;
    let v = &s.vectors;
    let mut h = v.transpose() * g_s * v;
    let d = h.nrows();
    for i in 0..d {
        for j in 0..d {
            let den = s.roots[i] + s.roots[j];
            h[(i, j)] = if den > 0.0 { h[(i, j)] / den } else { 0.0 };
        }
    }
    (value, Some(v * h * v.transpose()))
}

fn distance_parts(x: &Tensor, y: &Tensor, want_grad: bool) -> Result<(f64, Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>)> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(Error::Dimension(format!("Fréchet distance between {:?} and {:?}", x.shape(), y.shape())));
    }
    let (mx, cx) = moments(x)?;
    let (my, cy) = moments(y)?;
    let (cx, _) = regularize(&cx, x.shape()[0]);
    let (cy, _) = regularize(&cy, y.shape()[0]);
    let diff = &mx - &my;
    let (tr, g_tr) = trace_sqrt_product(&cx, &cy, want_grad);
    let value = diff.norm_squared() + cx.trace() + cy.trace() - 2.0 * tr;
    Ok((value, g_tr.map(|g| (diff, cx, g))))
}

/// `‖μx − μy‖² + Tr(Σx + Σy − 2(Σx^{1/2} Σy Σx^{1/2})^{1/2})`.
pub fn frechet_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(distance_parts(x, y, false)?.0)
}

/// Differentiable in `x`; `y` is a fixed reference set.
pub fn frechet_distance_var<'g>(x: &Var<'g>, y: &Tensor) -> Result<Var<'g>> {
    let (value, parts) = distance_parts(x.value(), y, x.graph().is_recording() && x.requires_grad())?;
    let Some((diff, _cx, g_tr)) = parts else {
        return Ok(x.graph().op(Tensor::scalar(value), &[x], |_, _, _| vec![None]));
    };
    let (n, d) = (x.shape()[0], x.shape()[1]);
    // dF/dΣx = I − 2 dTr/dΣx; Σx = Cᵀ C / (n − 1).
    let g_sigma = DMatrix::identity(d, d) - g_tr * 2.0;
    Ok(x.graph().op(Tensor::scalar(value), &[x], move |parents, _, gy| {
        let xv = parents[0];
        let m = DMatrix::from_row_slice(n, d, xv.data());
        let mu = DVector::from_iterator(d, (0..d).map(|j| m.column(j).sum() / n as f64));
        let mut grad = vec![0.0; n * d];
        for r in 0..n {
            let c = DVector::from_iterator(d, (0..d).map(|j| m[(r, j)] - mu[j]));
            let gc = if n > 1 { &g_sigma * c * (2.0 / (n - 1) as f64) } else { DVector::zeros(d) };
            for j in 0..d {
                grad[r * d + j] = gy.item() * (2.0 * diff[j] / n as f64 + gc[j]);
            }
        }
        vec![Some(Tensor::new([n, d], grad).unwrap())]
    }))
}

/// Runs the differentiable path on an inference graph.
pub fn frechet_distance_graph(x: &Tensor, y: &Tensor) -> Result<f64> {
    let g = Graph::inference();
    Ok(frechet_distance_var(&g.constant(x.clone()), y)?.item())
}
