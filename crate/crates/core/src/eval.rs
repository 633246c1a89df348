//! Prompt-alignment and temporal-consistency metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::clip::encode_images;
use crate::losses::frechet::frechet_distance;
use crate::losses::fvd::video_features;
use crate::model::{LossModels, Stp4d};
use crate::nn::Graph;
use crate::prompt::cosine;
use crate::tensor::Tensor;
use crate::train::AssetTarget;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clip_f: f64,
    pub clip_o: f64,
    pub fvd: f64,
    pub assets: usize,
    /// Mean wall-clock seconds spent producing one asset's video.
    pub seconds_per_asset: f64,
}

/// A video `[T, H, W, 3]`, its reference and the unit text embedding.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub video: Tensor,
    pub reference: Tensor,
    pub text: Vec<f64>,
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts.first().map(|t| t.last_dim()).ok_or_else(|| Error::Dimension("no features".into()))?;
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let rows = data.len() / cols;
    Tensor::new([rows, cols], data)
}

/// Fréchet distance between window features pooled over all videos.
pub fn pooled_fvd(videos: &[Tensor], references: &[Tensor], models: &LossModels) -> Result<f64> {
    let feats = |vs: &[Tensor]| -> Result<Tensor> {
        concat_rows(&vs.iter().map(|v| video_features(&models.fvd, v)).collect::<Result<Vec<_>>>()?)
    };
    frechet_distance(&feats(videos)?, &feats(references)?)
}

/// CLIP-F (per-frame cosine) and CLIP-O (cosine of the frame-averaged image
/// embedding), each averaged over videos.
pub fn clip_scores(samples: &[VideoSample], models: &LossModels) -> Result<(f64, f64)> {
    let mut clip_f = 0.0;
    let mut clip_o = 0.0;
    for s in samples {
        let im = encode_images(&models.clip, &s.video)?;
        let dim = im.last_dim();
        let frames = im.rows();
        let mut mean = vec![0.0; dim];
        let mut per_frame = 0.0;
        for row in im.data().chunks(dim) {
            per_frame += cosine(row, &s.text);
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / frames as f64;
            }
        }
        clip_f += per_frame / frames as f64;
        clip_o += cosine(&mean, &s.text);
    }
    let n = samples.len() as f64;
    let (f, o) = (clip_f / n, clip_o / n);
    if !f.is_finite() || !o.is_finite() {
        return Err(Error::Encoder("zero-norm embedding in CLIP score".into()));
    }
    Ok((f, o))
}

pub fn metrics(samples: &[VideoSample], models: &LossModels, seconds_per_asset: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let (clip_f, clip_o) = clip_scores(samples, models)?;
    let videos: Vec<Tensor> = samples.iter().map(|s| s.video.clone()).collect();
    let refs: Vec<Tensor> = samples.iter().map(|s| s.reference.clone()).collect();
    let fvd = pooled_fvd(&videos, &refs, models)?;
    Ok(MetricsReport { clip_f, clip_o, fvd, assets: samples.len(), seconds_per_asset })
}

/// Renders the model's video for every target (in parallel, order kept).
pub fn generate_videos(model: &Stp4d, targets: &[AssetTarget]) -> Result<Vec<(Tensor, f64)>> {
    targets
        .par_iter()
        .map(|t| {
            let start = Instant::now();
            let g = Graph::inference();
            let p = model.store.bind(&g);
            let out = model.forward(&g, &p, &t.noise.tokens, &t.text)?;
            let video = model.render(&out.raw, &t.cameras)?.video.value().clone();
            Ok((video, start.elapsed().as_secs_f64()))
        })
        .collect()
}

pub fn evaluate(model: &Stp4d, targets: &[AssetTarget]) -> Result<MetricsReport> {
    let videos = generate_videos(model, targets)?;
    let secs = videos.iter().map(|v| v.1).sum::<f64>() / videos.len().max(1) as f64;
    let samples: Vec<VideoSample> = videos
        .into_iter()
        .zip(targets)
        .map(|((video, _), t)| VideoSample { video, reference: t.video.clone(), text: t.text.clone() })
        .collect();
    metrics(&samples, &LossModels::new(&model.cfg), secs)
}

/// Standard deviation of the pixel noise added to every copy.
pub const COPY_NOISE_STD: f64 = 0.01;

/// A permutation of `0..n` without fixed points (`n ≥ 2`).
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Noisy copy of `video`, optionally with frames reordered by `perm`.
pub fn noisy_copy(video: &Tensor, perm: Option<&[usize]>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let t = video.shape()[0];
    let per = video.numel() / t.max(1);
    let noise = Normal::new(0.0, COPY_NOISE_STD).expect("valid std");
    let mut out = Vec::with_capacity(video.numel());
    for f in 0..t {
        let src = perm.map_or(f, |p| p[f]);
        out.extend(video.data()[src * per..(src + 1) * per].iter().map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)));
    }
    Tensor::new(video.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyCheck {
    pub faithful: Vec<f64>,
    pub scrambled: Vec<f64>,
    /// Seeds on which the faithful copies scored strictly lower.
    pub wins: usize,
}

/// For each seed, compares the FVD of noisy faithful copies of `videos`
/// with that of noisy frame-deranged copies.
pub fn copy_check(videos: &[Tensor], seeds: &[u64], models: &LossModels) -> Result<CopyCheck> {
    let mut faithful = Vec::with_capacity(seeds.len());
    let mut scrambled = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut fa = Vec::with_capacity(videos.len());
        let mut sc = Vec::with_capacity(videos.len());
        for v in videos {
            fa.push(noisy_copy(v, None, &mut rng)?);
            let perm = derangement(v.shape()[0], &mut rng);
            sc.push(noisy_copy(v, Some(&perm), &mut rng)?);
        }
        faithful.push(pooled_fvd(&fa, videos, models)?);
        scrambled.push(pooled_fvd(&sc, videos, models)?);
    }
    let wins = faithful.iter().zip(&scrambled).filter(|(f, s)| f < s).count();
    Ok(CopyCheck { faithful, scrambled, wins })
}
