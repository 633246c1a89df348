//! Savitzky–Golay temporal smoothness of Gaussian trajectories.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

pub const SG_WINDOW: usize = 7;
pub const SG_ORDER: usize = 3;

/// Centre-point least-squares smoothing coefficients for an odd `window`
/// and polynomial `order < window`.
pub fn sg_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || order >= window {
        return Err(Error::Config(format!("Savitzky–Golay needs odd window > order, got ({window}, {order})")));
    }
    let h = (window / 2) as i64;
    let a = DMatrix::from_fn(window, order + 1, |r, c| ((r as i64 - h) as f64).powi(c as i32));
    let ata = a.transpose() * &a;
    let inv = ata.try_inverse().ok_or_else(|| Error::Config("singular Savitzky–Golay system".into()))?;
    let e0 = DVector::from_fn(order + 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let row = (inv * e0).transpose() * a.transpose();
    Ok(row.iter().copied().collect())
}

/// Window and order used for `frames`: `(7, 3)` or the largest odd window
/// that fits with order `min(3, w − 1)`.
pub fn effective_filter(frames: usize) -> (usize, usize) {
    let w = if frames >= SG_WINDOW { SG_WINDOW } else if frames % 2 == 1 { frames } else { frames.saturating_sub(1).max(1) };
    (w, SG_ORDER.min(w - 1))
}

/// Index and sign pattern of a point-reflected sample: `x[-k] = 2x[0] − x[k]`
/// and `x[T−1+k] = 2x[T−1] − x[T−1−k]`.
fn reflect(t: isize, frames: usize) -> (usize, Option<usize>) {
    let last = frames as isize - 1;
    if t < 0 {
        (0, Some((-t) as usize))
    } else if t > last {
        (last as usize, Some((2 * last - t) as usize))
    } else {
        (t as usize, None)
    }
}

fn sample(signal: &dyn Fn(usize) -> f64, t: isize, frames: usize) -> f64 {
    match reflect(t, frames) {
        (i, None) => signal(i),
        (anchor, Some(j)) => 2.0 * signal(anchor) - signal(j),
    }
}

/// `g̃ − g` for every trajectory. The centre tap cancels, and symmetric taps
/// are combined as `c_k((x_{t+k} − x_t) + (x_{t−k} − x_t))`, so constant and
/// (exactly representable) linear signals give exact zeros.
fn residual(x: &[f64], frames: usize, stride: usize, coeffs: &[f64]) -> Vec<f64> {
    let h = coeffs.len() / 2;
    let mut out = vec![0.0; x.len()];
    for lane in 0..stride {
        let sig = |t: usize| x[t * stride + lane];
        for t in 0..frames {
            let xt = sig(t);
            let mut acc = 0.0;
            for k in 1..=h {
                let fwd = sample(&sig, t as isize + k as isize, frames) - xt;
                let bwd = sample(&sig, t as isize - k as isize, frames) - xt;
                acc += coeffs[h + k] * (fwd + bwd);
            }
            out[t * stride + lane] = acc;
        }
    }
    out
}

/// Transpose of [`residual`] as a linear map.
fn residual_adjoint(gr: &[f64], frames: usize, stride: usize, coeffs: &[f64]) -> Vec<f64> {
    let h = coeffs.len() / 2;
    let mut gx = vec![0.0; gr.len()];
    for lane in 0..stride {
        let at = |t: usize| t * stride + lane;
        for t in 0..frames {
            let g = gr[at(t)];
            for k in 1..=h {
                let c = coeffs[h + k] * g;
                for off in [k as isize, -(k as isize)] {
                    match reflect(t as isize + off, frames) {
                        (i, None) => gx[at(i)] += c,
                        (anchor, Some(j)) => {
                            gx[at(anchor)] += 2.0 * c;
                            gx[at(j)] -= c;
                        }
                    }
                    gx[at(t)] -= c;
                }
            }
        }
    }
    gx
}

/// Mean squared SG residual over trajectories `[T, N_total, C]`.
pub fn loss_smooth_var<'g>(traj: &Var<'g>) -> Result<Var<'g>> {
    let s = traj.shape().to_vec();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::Dimension(format!("smoothness expects [T, N, C] trajectories, got {s:?}")));
    }
    let frames = s[0];
    if frames == 1 {
        return Ok(traj.graph().constant(Tensor::scalar(0.0)));
    }
    let (w, order) = effective_filter(frames);
    let coeffs = sg_coefficients(w, order)?;
    let stride = s[1] * s[2];
    let value = Tensor::new(s.clone(), residual(traj.value().data(), frames, stride, &coeffs))?;
    let r = traj.graph().op(value, &[traj], move |_, _, gy| {
        vec![Some(Tensor::new(s.clone(), residual_adjoint(gy.data(), frames, stride, &coeffs)).unwrap())]
    });
    Ok(r.square().mean())
}

pub fn loss_smooth(traj: &Tensor) -> Result<f64> {
    let g = Graph::inference();
    Ok(loss_smooth_var(&g.constant(traj.clone()))?.item())
}
