//! Prompt alignment with a toy image encoder: soft color histogram, average
//! pooled, projected by a fixed seeded matrix and L2-normalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_SEED: u64 = 0xc1_1b;

/// Anything mapping `[T, H, W, 3]` frames to unit vectors `[T, D']`.
pub trait ImageEncoder {
    fn dim(&self) -> usize;
    fn encode<'g>(&self, frames: &Var<'g>) -> Result<Var<'g>>;
}

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    pub bins: usize,
    /// `[3·bins, D']`.
    pub projection: Tensor,
}

impl ToyImageEncoder {
    pub fn new(dim: usize, bins: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Tensor::from_fn([3 * bins, dim], |_| StandardNormal.sample(&mut rng));
        Self { bins, projection }
    }

    pub fn with_dim(dim: usize) -> Self {
        Self::new(dim, DEFAULT_BINS, DEFAULT_SEED)
    }

    fn soft_assign(&self, v: f64) -> (Vec<f64>, Vec<f64>) {
        let b = self.bins as f64;
        let width = 1.0 / b;
        let raw: Vec<f64> = (0..self.bins)
            .map(|k| {
                let d = (v - (k as f64 + 0.5) / b) / width;
                (-0.5 * d * d).exp()
            })
            .collect();
        // d raw_k / dv
        let draw: Vec<f64> = (0..self.bins)
            .map(|k| -(v - (k as f64 + 0.5) / b) / (width * width) * raw[k])
            .collect();
        let s: f64 = raw.iter().sum();
        let ds: f64 = draw.iter().sum();
        let w = raw.iter().map(|r| r / s).collect();
        let dw = raw.iter().zip(&draw).map(|(r, dr)| (dr * s - r * ds) / (s * s)).collect();
        (w, dw)
    }

    /// `[T, 3·bins]` average-pooled soft histograms.
    pub fn histograms<'g>(&self, frames: &Var<'g>) -> Result<Var<'g>> {
        let s = frames.shape().to_vec();
        if s.len() != 4 || s[3] != 3 || s[1] * s[2] == 0 {
            return Err(Error::Dimension(format!("expected [T, H, W, 3] frames, got {s:?}")));
        }
        let (t, px) = (s[0], s[1] * s[2]);
        let nb = self.bins;
        let x = frames.value().data();
        let mut hist = vec![0.0; t * 3 * nb];
        for f in 0..t {
            for p in 0..px {
                for c in 0..3 {
                    let (w, _) = self.soft_assign(x[(f * px + p) * 3 + c]);
                    for k in 0..nb {
                        hist[(f * 3 + c) * nb + k] += w[k] / px as f64;
                    }
                }
            }
        }
        let me = self.clone();
        Ok(frames.graph().op(Tensor::new([t, 3 * nb], hist)?, &[frames], move |parents, _, gy| {
            let x = parents[0].data();
            let mut g = vec![0.0; x.len()];
            for f in 0..t {
                for p in 0..px {
                    for c in 0..3 {
                        let i = (f * px + p) * 3 + c;
                        let (_, dw) = me.soft_assign(x[i]);
                        g[i] = (0..nb).map(|k| gy.data()[(f * 3 + c) * nb + k] * dw[k]).sum::<f64>() / px as f64;
                    }
                }
            }
            vec![Some(Tensor::new(s.clone(), g).unwrap())]
        }))
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn dim(&self) -> usize {
        self.projection.shape()[1]
    }

    fn encode<'g>(&self, frames: &Var<'g>) -> Result<Var<'g>> {
        let h = self.histograms(frames)?;
        let p = frames.graph().constant(self.projection.clone());
        h.matmul(&p)?.l2_normalize_last()
    }
}

pub fn encode_images(enc: &dyn ImageEncoder, frames: &Tensor) -> Result<Tensor> {
    let g = Graph::inference();
    Ok(enc.encode(&g.constant(frames.clone()))?.value().clone())
}

/// `mean_t (1 − cos(e, E_im(V^t)))` for a unit text embedding `e`.
pub fn loss_clip_var<'g>(frames: &Var<'g>, text: &[f64], enc: &dyn ImageEncoder) -> Result<Var<'g>> {
    if text.len() != enc.dim() {
        return Err(Error::Encoder(format!("text embedding has dimension {}, image encoder {}", text.len(), enc.dim())));
    }
    let norm = text.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Encoder("zero-norm text embedding".into()));
    }
    let e = frames.graph().constant(Tensor::new([text.len(), 1], text.iter().map(|v| v / norm).collect())?);
    let im = enc.encode(frames)?;
    Ok(im.matmul(&e)?.mean().neg().add_scalar(1.0))
}

pub fn loss_clip(frames: &Tensor, text: &[f64], enc: &dyn ImageEncoder) -> Result<f64> {
    let g = Graph::inference();
    Ok(loss_clip_var(&g.constant(frames.clone()), text, enc)?.item())
}

/// Cosine-based loss from precomputed unit image embeddings `[T, D']`.
pub fn loss_clip_embeddings(image: &Tensor, text: &[f64]) -> Result<f64> {
    if image.rank() != 2 || image.shape()[1] != text.len() {
        return Err(Error::Dimension(format!("image embeddings {:?} vs text dim {}", image.shape(), text.len())));
    }
    let t = image.shape()[0];
    let mut acc = 0.0;
    for row in image.data().chunks(text.len()) {
        let c = crate::prompt::cosine(row, text);
        if !c.is_finite() {
            return Err(Error::Encoder("zero-norm embedding".into()));
        }
        acc += 1.0 - c;
    }
    Ok(acc / t as f64)
}
