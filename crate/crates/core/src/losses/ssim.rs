//! Structural similarity with an 11-tap Gaussian window (σ = 1.5).

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn taps() -> [f64; WINDOW] {
    let h = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - h;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    w
}

/// Per-position 1-D weights restricted to `[0, len)` and renormalized.
fn axis_weights(len: usize) -> Vec<Vec<(usize, f64)>> {
    let taps = taps();
    let h = (WINDOW / 2) as isize;
    (0..len as isize)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = (-h..=h)
                .filter(|o| (0..len as isize).contains(&(i + o)))
                .map(|o| ((i + o) as usize, taps[(o + h) as usize]))
                .collect();
            let s: f64 = row.iter().map(|(_, w)| w).sum();
            row.iter_mut().for_each(|(_, w)| *w /= s);
            row
        })
        .collect()
}

/// Applies (or, with `adjoint`, transposes) the separable blur to a
/// `[F, H, W, C]` buffer.
fn blur(data: &[f64], shape: &[usize], adjoint: bool) -> Vec<f64> {
    let (f, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (wy, wx) = (axis_weights(h), axis_weights(w));
    let idx = |fi: usize, y: usize, x: usize, ch: usize| ((fi * h + y) * w + x) * c + ch;
    let mut tmp = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    let pass = |src: &[f64], dst: &mut [f64], along_y: bool| {
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let row = if along_y { &wy[y] } else { &wx[x] };
                    for &(j, wt) in row {
                        let (sy, sx) = if along_y { (j, x) } else { (y, j) };
                        for ch in 0..c {
                            if adjoint {
                                dst[idx(fi, sy, sx, ch)] += wt * src[idx(fi, y, x, ch)];
                            } else {
                                dst[idx(fi, y, x, ch)] += wt * src[idx(fi, sy, sx, ch)];
                            }
                        }
                    }
                }
            }
        }
    };
    if adjoint {
        pass(data, &mut tmp, false);
        pass(&tmp, &mut out, true);
    } else {
        pass(data, &mut tmp, true);
        pass(&tmp, &mut out, false);
    }
    out
}

fn blur_var<'g>(x: &Var<'g>) -> Var<'g> {
    let shape = x.shape().to_vec();
    let value = Tensor::new(shape.clone(), blur(x.value().data(), &shape, false)).expect("shape preserved");
    x.graph().op(value, &[x], move |_, _, gy| vec![Some(Tensor::new(shape.clone(), blur(gy.data(), &shape, true)).unwrap())])
}

fn check_video(v: &[usize]) -> Result<()> {
    if v.len() != 4 || v.iter().any(|&e| e == 0) {
        return Err(Error::Dimension(format!("expected non-empty [T, H, W, C] video, got {v:?}")));
    }
    Ok(())
}

/// Per-pixel, per-channel SSIM map of two `[T, H, W, C]` videos.
pub fn ssim_map_var<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    check_video(a.shape())?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("SSIM between {:?} and {:?}", a.shape(), b.shape())));
    }
    let mu_a = blur_var(a);
    let mu_b = blur_var(b);
    let mu_ab = mu_a.mul(&mu_b)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let s_aa = blur_var(&a.square()).sub(&mu_aa)?;
    let s_bb = blur_var(&b.square()).sub(&mu_bb)?;
    let s_ab = blur_var(&a.mul(b)?).sub(&mu_ab)?;
    let num = mu_ab.scale(2.0).add_scalar(C1).mul(&s_ab.scale(2.0).add_scalar(C2))?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(C1).mul(&s_aa.add(&s_bb)?.add_scalar(C2))?;
    num.div(&den)
}

/// `mean_t (1 − SSIM(V_gt^t, V^t))` with SSIM averaged over pixels and channels.
pub fn loss_ssim_var<'g>(v: &Var<'g>, v_gt: &Var<'g>) -> Result<Var<'g>> {
    Ok(ssim_map_var(v, v_gt)?.mean().neg().add_scalar(1.0))
}

pub fn loss_ssim(v: &Tensor, v_gt: &Tensor) -> Result<f64> {
    let g = Graph::inference();
    Ok(loss_ssim_var(&g.constant(v.clone()), &g.constant(v_gt.clone()))?.item())
}

/// Mean SSIM of two `[H, W, C]` images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let lift = |t: &Tensor| -> Result<Tensor> {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(s)
    };
    Ok(1.0 - loss_ssim(&lift(a)?, &lift(b)?)?)
}
