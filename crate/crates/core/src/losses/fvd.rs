//! Toy video features for the Fréchet video distance: a frozen random 3-D
//! convolution with `tanh` and global average pooling, evaluated on
//! temporal windows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::frechet::frechet_distance_var;
use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SEED: u64 = 0x1_3d;

/// Anything mapping a `[T, H, W, 3]` video to `[windows, features]`.
pub trait VideoFeatures {
    fn features<'g>(&self, video: &Var<'g>) -> Result<Var<'g>>;
}

#[derive(Clone, Debug)]
pub struct ToyI3d {
    pub filters: usize,
    pub kt: usize,
    pub window: usize,
    pub stride: usize,
    /// `[filters, kt, 3, 3, 3]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Default for ToyI3d {
    fn default() -> Self {
        Self::new(8, 4, 2, DEFAULT_SEED)
    }
}

impl ToyI3d {
    pub fn new(filters: usize, window: usize, stride: usize, seed: u64) -> Self {
        let kt = 2;
        let fan_in = kt * 27;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        let weights = (0..filters * fan_in).map(|_| w.sample(&mut rng)).collect();
        let b = Normal::new(0.0, 0.1).expect("valid std");
        let bias = (0..filters).map(|_| b.sample(&mut rng)).collect();
        Self { filters, kt, window, stride, weights, bias }
    }

    /// Window start frames; a video shorter than the window yields one
    /// window covering all frames.
    pub fn window_starts(&self, frames: usize) -> Vec<usize> {
        if frames < self.window {
            return vec![0];
        }
        (0..=frames - self.window).step_by(self.stride.max(1)).collect()
    }

    fn geometry(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Dimension(format!("expected [T, H, W, 3] video, got {shape:?}")));
        }
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        if t < self.kt {
            return Err(Error::Dimension(format!("video of {t} frames is shorter than the temporal kernel")));
        }
        let span = self.window.min(t);
        Ok((t, h, w, span, span + 1 - self.kt))
    }

    /// Visits every (window, filter, pre-activation) with its receptive
    /// field; `f` receives `(window, filter, taps)` where taps are
    /// `(video index, weight)`.
    fn for_each_unit(&self, shape: &[usize], mut f: impl FnMut(usize, usize, &[(usize, f64)])) -> Result<()> {
        let (_, h, w, _, out_t) = self.geometry(shape)?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut taps = Vec::with_capacity(self.kt * 27);
        for (wi, &s) in self.window_starts(shape[0]).iter().enumerate() {
            for fi in 0..self.filters {
                for ot in 0..out_t {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            taps.clear();
                            for dt in 0..self.kt {
                                for dy in 0..3 {
                                    let y = (2 * oy + dy) as isize - 1;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3 {
                                        let x = (2 * ox + dx) as isize - 1;
                                        if x < 0 || x >= w as isize {
                                            continue;
                                        }
                                        for c in 0..3 {
                                            let vi = (((s + ot + dt) * h + y as usize) * w + x as usize) * 3 + c;
                                            let wi_ = (((fi * self.kt + dt) * 3 + dy) * 3 + dx) * 3 + c;
                                            taps.push((vi, self.weights[wi_]));
                                        }
                                    }
                                }
                            }
                            f(wi, fi, &taps);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn units_per_feature(&self, shape: &[usize]) -> Result<usize> {
        let (_, h, w, _, out_t) = self.geometry(shape)?;
        Ok(out_t * h.div_ceil(2) * w.div_ceil(2))
    }
}

impl VideoFeatures for ToyI3d {
    fn features<'g>(&self, video: &Var<'g>) -> Result<Var<'g>> {
        let shape = video.shape().to_vec();
        let windows = self.window_starts(shape.first().copied().unwrap_or(0)).len();
        let count = self.units_per_feature(&shape)? as f64;
        let x = video.value().data();
        let mut feats = vec![0.0; windows * self.filters];
        self.for_each_unit(&shape, |wi, fi, taps| {
            let pre = self.bias[fi] + taps.iter().map(|&(vi, wt)| wt * x[vi]).sum::<f64>();
            feats[wi * self.filters + fi] += pre.tanh() / count;
        })?;
        let value = Tensor::new([windows, self.filters], feats)?;
        let me = self.clone();
        Ok(video.graph().op(value, &[video], move |parents, _, gy| {
            let x = parents[0].data();
            let mut grad = vec![0.0; x.len()];
            me.for_each_unit(&shape, |wi, fi, taps| {
                let pre = me.bias[fi] + taps.iter().map(|&(vi, wt)| wt * x[vi]).sum::<f64>();
                let th = pre.tanh();
                let gp = gy.data()[wi * me.filters + fi] * (1.0 - th * th) / count;
                for &(vi, wt) in taps {
                    grad[vi] += gp * wt;
                }
            })
            .expect("geometry validated in forward");
            vec![Some(Tensor::new(shape.clone(), grad).unwrap())]
        }))
    }
}

pub fn video_features(extractor: &dyn VideoFeatures, video: &Tensor) -> Result<Tensor> {
    let g = Graph::inference();
    Ok(extractor.features(&g.constant(video.clone()))?.value().clone())
}

/// Fréchet distance between window features of `v` and of `v_gt`.
pub fn loss_fvd_var<'g>(v: &Var<'g>, v_gt: &Tensor, extractor: &dyn VideoFeatures) -> Result<Var<'g>> {
    let fx = extractor.features(v)?;
    let fy = video_features(extractor, v_gt)?;
    if fx.shape()[0] < 2 {
        log::warn!("FVD over {} window(s); covariance is regularized only", fx.shape()[0]);
    }
    frechet_distance_var(&fx, &fy)
}

pub fn loss_fvd(v: &Tensor, v_gt: &Tensor, extractor: &dyn VideoFeatures) -> Result<f64> {
    let g = Graph::inference();
    Ok(loss_fvd_var(&g.constant(v.clone()), v_gt, extractor)?.item())
}
