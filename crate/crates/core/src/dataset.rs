//! Asset directories (frames, caption, cameras) and the procedural toy set.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{read_cameras, write_cameras, Camera};
use crate::config::{default_cameras, ViewSettings};
use crate::error::{Error, Result};
use crate::gaussians::{deactivate_row, D};
use crate::imageio;
use crate::losses::clip::{encode_images, ToyImageEncoder};
use crate::ply::{frame_name, save_ply, PlyFormat};
use crate::prompt::{embedding_key, fnv1a, write_embedding_json};
use crate::renderer::render_frame;
use crate::tensor::Tensor;

/// Directory names under a dataset root that are never assets.
pub const RESERVED_DIRS: [&str; 2] = ["embeddings", "runs"];

#[derive(Clone, Debug, PartialEq)]
pub struct AssetRecord {
    pub id: String,
    pub caption: String,
    pub frames: Vec<PathBuf>,
    pub cameras: PathBuf,
}

impl AssetRecord {
    /// Noise seed used for this asset during training and evaluation.
    pub fn noise_seed(&self) -> u64 {
        fnv1a(self.id.as_bytes())
    }

    pub fn load_cameras(&self) -> Result<Vec<Camera>> {
        read_cameras(&self.cameras)
    }

    /// Decoded frames `[H, W, 3]`, resized to `size = [width, height]`.
    pub fn load_frames(&self, size: [usize; 2]) -> Result<Vec<Tensor>> {
        self.frames.iter().map(|p| imageio::resize(&imageio::load_image(p)?, size[0], size[1])).collect()
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg" | "gif"))
}

/// Reads one asset directory; `Ok(None)` means skipped with a warning.
fn load_asset(dir: &Path) -> Result<Option<AssetRecord>> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let caption_path = dir.join("caption.txt");
    let cameras = dir.join("cameras.json");
    if !caption_path.is_file() {
        log::warn!("skipping asset `{id}`: no caption.txt");
        return Ok(None);
    }
    if !cameras.is_file() {
        log::warn!("skipping asset `{id}`: no cameras.json");
        return Ok(None);
    }
    let caption = std::fs::read_to_string(&caption_path)?.trim().to_string();
    if caption.is_empty() {
        log::warn!("skipping asset `{id}`: empty caption");
        return Ok(None);
    }
    let mut frames: Vec<PathBuf> = match std::fs::read_dir(dir.join("frames")) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect(),
        Err(_) => Vec::new(),
    };
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Dataset(format!("asset `{id}` has no frames")));
    }
    let cams = read_cameras(&cameras).map_err(|e| Error::Dataset(format!("asset `{id}`: {e}")))?;
    if cams.len() != frames.len() && cams.len() != 1 {
        return Err(Error::Dataset(format!(
            "asset `{id}` has {} frames but {} cameras",
            frames.len(),
            cams.len()
        )));
    }
    Ok(Some(AssetRecord { id, caption, frames, cameras }))
}

/// Every asset directory under `root`, sorted by id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<AssetRecord>> {
    let root = root.as_ref();
    let rd = std::fs::read_dir(root).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| !RESERVED_DIRS.iter().any(|r| p.file_name().is_some_and(|n| n == *r)))
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        if let Some(rec) = load_asset(&d)? {
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no assets under {}", root.display())));
    }
    Ok(out)
}

/// Source index of output frame `t` when `source` frames map onto `frames`.
pub fn resample_index(t: usize, source: usize, frames: usize) -> usize {
    if frames <= 1 || source <= 1 {
        return 0;
    }
    ((t * (source - 1)) as f64 / (frames - 1) as f64).round() as usize
}

pub fn resample<T: Clone>(items: &[T], frames: usize) -> Vec<T> {
    (0..frames).map(|t| items[resample_index(t, items.len(), frames)].clone()).collect()
}

/// Stacks `[H, W, 3]` frames into `[T, H, W, 3]`.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::Dimension("no frames to stack".into()))?;
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * frames.len());
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::Dimension(format!("frame shapes differ: {:?} vs {:?}", f.shape(), first.shape())));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct ToyDataOptions {
    pub assets: usize,
    pub seed: u64,
    pub frames: usize,
    pub size: [usize; 2],
    /// Text/image embedding width written under `embeddings/`.
    pub dim: usize,
    pub radius: f64,
}

impl Default for ToyDataOptions {
    fn default() -> Self {
        Self { assets: 3, seed: 0, frames: 8, size: [64, 64], dim: 64, radius: 4.0 }
    }
}

const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.85, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("purple", [0.65, 0.2, 0.85]),
    ("white", [0.95, 0.95, 0.95]),
];

struct Blob {
    color: usize,
    start: [f64; 3],
    velocity: [f64; 3],
    scale: [f64; 3],
    spin: f64,
}

fn direction_word(v: [f64; 3]) -> &'static str {
    if v[0].abs() >= v[1].abs() {
        if v[0] > 0.0 { "right" } else { "left" }
    } else if v[1] > 0.0 {
        "up"
    } else {
        "down"
    }
}

/// Axis-angle rotation about `y` as a `(w, x, y, z)` quaternion.
fn yaw(angle: f64) -> [f64; 4] {
    [(angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0]
}

/// Physical Gaussians of one toy scene, `[frames, blobs, D]` raw attributes.
fn scene_frames(blobs: &[Blob], frames: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames * blobs.len() * D);
    for t in 0..frames {
        let tau = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
        for b in blobs {
            let pos = [0, 1, 2].map(|k| b.start[k] + b.velocity[k] * tau);
            data.extend_from_slice(&deactivate_row(pos, yaw(b.spin * tau), b.scale, COLORS[b.color].1, 0.95));
        }
    }
    Tensor::new([frames, blobs.len(), D], data)
}

/// Writes `opts.assets` moving-blob scenes under `out` and returns the
/// records. Each asset holds `caption.txt`, `cameras.json`, rendered
/// `frames/` and ground-truth `gt/` PLYs; `embeddings/` holds one file-backend
/// embedding per caption.
pub fn make_toy_data(out: impl AsRef<Path>, opts: &ToyDataOptions) -> Result<Vec<AssetRecord>> {
    let out = out.as_ref();
    if opts.assets == 0 || opts.frames == 0 || opts.dim == 0 {
        return Err(Error::Config("toy data needs at least one asset, frame and embedding channel".into()));
    }
    let emb_dir = out.join("embeddings");
    std::fs::create_dir_all(&emb_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let encoder = ToyImageEncoder::with_dim(opts.dim);
    let view = ViewSettings { radius: opts.radius, ..ViewSettings::default() };
    let cams = default_cameras(&view, opts.frames, opts.size);
    for a in 0..opts.assets {
        let count = rng.random_range(2..=4usize);
        let mut palette: Vec<usize> = (0..COLORS.len()).collect();
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let color = palette.remove(rng.random_range(0..palette.len()));
            let start = [rng.random_range(-0.9..0.9), rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4)];
            let velocity = [rng.random_range(-0.8..0.8), rng.random_range(-0.5..0.5), 0.0];
            let base = rng.random_range(0.12..0.22);
            let scale = [base * rng.random_range(1.0..1.8), base, base * rng.random_range(0.8..1.2)];
            blobs.push(Blob { color, start, velocity, scale, spin: rng.random_range(-1.5..1.5) });
        }
        let caption = blobs
            .iter()
            .map(|b| format!("a {} blob moving {}", COLORS[b.color].0, direction_word(b.velocity)))
            .collect::<Vec<_>>()
            .join(" and ");

        let id = format!("asset_{a:03}");
        let dir = out.join(&id);
        std::fs::create_dir_all(dir.join("frames"))?;
        std::fs::create_dir_all(dir.join("gt"))?;
        std::fs::write(dir.join("caption.txt"), format!("{caption}\n"))?;
        write_cameras(dir.join("cameras.json"), &cams)?;

        let raw = scene_frames(&blobs, opts.frames)?;
        let attrs = crate::gaussians::activate(&raw)?;
        let mut rendered = Vec::with_capacity(opts.frames);
        for t in 0..opts.frames {
            let frame = attrs.slice0(t, 1)?.reshape([blobs.len(), D])?;
            save_ply(dir.join("gt").join(frame_name(t, "ply")), &frame, PlyFormat::BinaryLittleEndian)?;
            let img = render_frame(&frame, &cams[t], [0.0; 3])?;
            imageio::save_png(dir.join("frames").join(frame_name(t, "png")), &img)?;
            // Embed what was written, after 8-bit quantization.
            rendered.push(imageio::load_image(dir.join("frames").join(frame_name(t, "png")))?);
        }
        let im = encode_images(&encoder, &stack_frames(&rendered)?)?;
        let mut mean = vec![0.0; opts.dim];
        for row in im.data().chunks(opts.dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / opts.frames as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: Vec<f64> = mean.iter().map(|v| v / norm).collect();
        write_embedding_json(&emb_dir.join(format!("{}.json", embedding_key(&caption))), &mean)?;
    }
    load_dataset(out)
}
