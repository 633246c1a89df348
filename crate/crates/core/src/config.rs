//! Pipeline configuration (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gie;
use crate::losses::LossWeights;
use crate::optim::OptimizerConfig;
use crate::prompt::PromptConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GieSettings {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub window: [usize; 2],
    pub n_plus: usize,
    /// Zero-pad the fused plane tokens instead of requiring divisibility.
    pub pad: bool,
}

impl Default for GieSettings {
    fn default() -> Self {
        Self { depth: 2, hidden: 32, heads: 4, window: [gie::DEFAULT_WINDOW; 2], n_plus: 20, pad: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub weights: LossWeights,
    /// Timestamp pairs per rigidity evaluation.
    pub pairs: usize,
    pub all_references: bool,
    /// Smooth every attribute channel instead of positions only.
    pub smooth_all_channels: bool,
    pub fvd_seed: u64,
    pub clip_bins: usize,
    pub clip_seed: u64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            pairs: 4,
            all_references: false,
            smooth_all_channels: false,
            fvd_seed: crate::losses::fvd::DEFAULT_SEED,
            clip_bins: crate::losses::clip::DEFAULT_BINS,
            clip_seed: crate::losses::clip::DEFAULT_SEED,
        }
    }
}

/// Orbit used when no dataset cameras are available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSettings {
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_y_deg: f64,
    /// Azimuth swept across the sequence, in degrees.
    pub sweep_deg: f64,
    pub background: [f64; 3],
    pub geometric_grads: bool,
}

impl Default for ViewSettings {
    fn default() -> Self {
        Self { radius: 4.0, elevation_deg: 15.0, fov_y_deg: 40.0, sweep_deg: 0.0, background: [0.0; 3], geometric_grads: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub n_total: usize,
    pub groups: usize,
    pub anchor_frames: usize,
    pub frames: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub image_size: [usize; 2],
    pub seed: u64,
    pub gie: GieSettings,
    pub optimizer: OptimizerConfig,
    pub loss: LossSettings,
    pub prompt: PromptConfig,
    pub view: ViewSettings,
    pub checkpoint_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Small CPU configuration.
    pub fn desk() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("runs/desk"),
            n_total: 200,
            groups: 10,
            anchor_frames: 4,
            frames: 8,
            model_dim: 64,
            heads: 4,
            depth: 2,
            steps: 4,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_size: [64, 64],
            seed: 0,
            gie: GieSettings::default(),
            optimizer: OptimizerConfig::desk(),
            loss: LossSettings::default(),
            prompt: PromptConfig::default(),
            view: ViewSettings::default(),
            checkpoint_every: 0,
        }
    }

    /// Published model sizes (40000 Gaussians in 400 groups, 12 anchor and
    /// 24 output frames, width 768, 50 steps, depth 6).
    pub fn paper() -> Self {
        Self {
            n_total: 40_000,
            groups: 400,
            anchor_frames: 12,
            frames: 24,
            model_dim: 768,
            heads: 12,
            depth: 6,
            steps: 50,
            gie: GieSettings { n_plus: 100, ..GieSettings::default() },
            optimizer: OptimizerConfig::default(),
            ..Self::desk()
        }
    }

    pub fn group_size(&self) -> usize {
        self.n_total / self.groups.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_total", self.n_total),
            ("groups", self.groups),
            ("anchor_frames", self.anchor_frames),
            ("frames", self.frames),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("steps", self.steps),
            ("gie.hidden", self.gie.hidden),
            ("gie.heads", self.gie.heads),
            ("gie.n_plus", self.gie.n_plus),
            ("image width", self.image_size[0]),
            ("image height", self.image_size[1]),
            ("loss.pairs", self.loss.pairs),
            ("loss.clip_bins", self.loss.clip_bins),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_total % self.groups != 0 {
            return Err(Error::Config(format!("n_total {} is not divisible by groups {}", self.n_total, self.groups)));
        }
        if self.frames < self.anchor_frames {
            return Err(Error::Config(format!("frames {} fewer than anchor frames {}", self.frames, self.anchor_frames)));
        }
        if self.model_dim % self.heads != 0 || self.gie.hidden % self.gie.heads != 0 {
            return Err(Error::Config("head counts must divide their widths".into()));
        }
        gie::fused_rows(self.groups, self.group_size(), self.anchor_frames, self.gie.n_plus, self.gie.pad)?;
        crate::diffusion::make_schedule(self.steps, self.beta_start, self.beta_end)?;
        self.optimizer.validate()?;
        self.loss.weights.validate()
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = self.data_dir.as_mut() {
            fix(d);
        }
        fix(&mut self.out_dir);
        if let Some(d) = self.prompt.embedding_dir.as_mut() {
            fix(d);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Fallback cameras: one per output frame on the configured orbit.
    pub fn default_cameras(&self) -> Vec<Camera> {
        default_cameras(&self.view, self.frames, self.image_size)
    }
}

pub fn default_cameras(view: &ViewSettings, frames: usize, size: [usize; 2]) -> Vec<Camera> {
    let el = view.elevation_deg.to_radians();
    (0..frames)
        .map(|t| {
            let az = if frames > 1 { view.sweep_deg.to_radians() * t as f64 / (frames - 1) as f64 } else { 0.0 };
            let eye = [view.radius * el.cos() * az.sin(), view.radius * el.sin(), -view.radius * el.cos() * az.cos()];
            Camera::look_at(eye, [0.0; 3], view.fov_y_deg, size[0], size[1])
        })
        .collect()
}
