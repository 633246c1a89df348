//! Text to a 4D asset: per-frame PLYs, rendered PNGs, a GIF and timings.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::stack_frames;
use crate::error::Result;
use crate::gaussians::{activate, D};
use crate::imageio;
use crate::model::{noise_input, Stp4d};
use crate::ply::{frame_name, save_ply, PlyFormat};
use crate::prompt::TextEncoder;
use crate::renderer::{cameras_for, render_frame};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prompt: String,
    pub seed: u64,
    pub frames: usize,
    pub gaussians: usize,
    pub encode_s: f64,
    pub generate_s: f64,
    pub render_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug)]
pub struct Asset {
    /// Activated attributes per frame, `[N_total, D]` in Gaussian id order.
    pub frames: Vec<Tensor>,
    pub timing: Timing,
}

impl Asset {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// Deterministic in `(parameters, prompt, seed)`.
pub fn generate(model: &Stp4d, prompt: &str, seed: u64) -> Result<Asset> {
    let start = Instant::now();
    let encoder = TextEncoder::new(model.cfg.prompt.clone(), model.cfg.model_dim);
    let e = encoder.encode(prompt)?;
    let encode_s = start.elapsed().as_secs_f64();
    let noise = noise_input(&model.cfg, seed)?;
    let raw = model.generate_raw(&noise.tokens, &e.values)?;
    let flat = noise.grouping.unapply(&raw)?;
    let attrs = activate(&flat)?;
    let n = model.cfg.n_total;
    let frames = (0..model.cfg.frames)
        .map(|t| attrs.slice0(t, 1)?.reshape([n, D]))
        .collect::<Result<Vec<_>>>()?;
    let total = start.elapsed().as_secs_f64();
    Ok(Asset {
        timing: Timing {
            prompt: prompt.to_string(),
            seed,
            frames: frames.len(),
            gaussians: n,
            encode_s,
            generate_s: total - encode_s,
            render_s: 0.0,
            total_s: total,
        },
        frames,
    })
}

/// Renders activated frames with one camera per frame (or a shared one).
pub fn render_frames(frames: &[Tensor], cams: &[Camera], background: [f64; 3]) -> Result<Vec<Tensor>> {
    let cams = cameras_for(cams, frames.len())?;
    frames.iter().zip(cams).map(|(f, c)| render_frame(f, c, background)).collect()
}

/// Writes `frame_%04d.ply`, `frame_%04d.png`, `animation.gif` and
/// `timing.json` under `out`; returns the rendered video `[T, H, W, 3]`.
pub fn export(asset: &mut Asset, cams: &[Camera], background: [f64; 3], out: impl AsRef<Path>) -> Result<Tensor> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let images = render_frames(&asset.frames, cams, background)?;
    asset.timing.render_s = start.elapsed().as_secs_f64();
    for (t, (frame, img)) in asset.frames.iter().zip(&images).enumerate() {
        save_ply(out.join(frame_name(t, "ply")), frame, PlyFormat::BinaryLittleEndian)?;
        imageio::save_png(out.join(frame_name(t, "png")), img)?;
    }
    imageio::save_gif(out.join("animation.gif"), &images, 100)?;
    std::fs::write(out.join("timing.json"), serde_json::to_string_pretty(&asset.timing)?)?;
    stack_frames(&images)
}
