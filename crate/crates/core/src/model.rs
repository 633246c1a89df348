//! The full generator: prompt conditioning, DDIM sampling, geometric
//! enhancement, temporal extension, activation and rendering.

use std::collections::BTreeMap;
use std::path::Path;

use crate::camera::Camera;
use crate::config::PipelineConfig;
use crate::diffusion::{make_schedule, sample, to_tokens, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gaussians::{activate_var, group_knn, init_noise, Grouping, D, OPACITY, ROT, SCALE};
use crate::gie::{Gie, GieConfig};
use crate::losses::{self, LossReport, References, TimestampPairSet, ToyI3d, ToyImageEncoder};
use crate::nn::{checkpoint, AttentionConfig, Bindings, Graph, Init, ParameterStore, Var};
use crate::prompt::PromptConditioner;
use crate::renderer::{cameras_for, render_var, RenderOptions};
use crate::ted::{ExtensionRatio, Ted};
use crate::tensor::Tensor;

/// Raw scale offset: new Gaussians start with extents near `exp(-2)`.
pub const SCALE_OFFSET: f64 = -2.0;
/// Raw opacity offset.
pub const OPACITY_OFFSET: f64 = 0.0;

/// Constant added to every generated raw attribute row: identity rotation and
/// small scales, so an untrained network already emits renderable Gaussians.
pub fn attribute_offset() -> [f64; D] {
    let mut o = [0.0; D];
    o[ROT] = 1.0;
    for k in 0..3 {
        o[SCALE + k] = SCALE_OFFSET;
    }
    o[OPACITY] = OPACITY_OFFSET;
    o
}

/// Grouped anchor noise flattened to tokens.
#[derive(Clone, Debug)]
pub struct NoiseInput {
    /// `[T_A·G, N·D]`.
    pub tokens: Tensor,
    pub grouping: Grouping,
}

pub fn noise_input(cfg: &PipelineConfig, seed: u64) -> Result<NoiseInput> {
    let noise = init_noise(cfg.anchor_frames, cfg.n_total, D, seed);
    let grouped = group_knn(&noise, cfg.groups)?;
    Ok(NoiseInput { tokens: to_tokens(&grouped.values)?, grouping: grouped.grouping })
}

pub struct ForwardOutput<'g> {
    /// `ẽ`, `[T_A, D']`.
    pub e_tilde: Var<'g>,
    /// `𝒢^P` tokens after sampling, `[T_A·G, N·D]`.
    pub sampled: Var<'g>,
    /// `𝒢^SP` tokens, `[T_A·G, N·D]`.
    pub enhanced: Var<'g>,
    /// Raw `𝒢^STP` plus the attribute offset, `[T, G, N, D]`.
    pub raw: Var<'g>,
}

pub struct Rendered<'g> {
    /// Activated attributes `[T, G, N, D]`.
    pub attrs: Var<'g>,
    /// `[T, H, W, 3]`.
    pub video: Var<'g>,
}

/// Frozen extractors used by the FVD and prompt-alignment losses.
#[derive(Clone, Debug)]
pub struct LossModels {
    pub fvd: ToyI3d,
    pub clip: ToyImageEncoder,
}

impl LossModels {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let l = &cfg.loss;
        Self {
            fvd: ToyI3d::new(8, 4, 2, l.fvd_seed),
            clip: ToyImageEncoder::new(cfg.model_dim, l.clip_bins, l.clip_seed),
        }
    }
}

/// Per-call sampling for the rigidity loss.
pub fn rigidity_sampling(cfg: &PipelineConfig, seed: u64) -> Result<(TimestampPairSet, References)> {
    let pairs = TimestampPairSet::sample(cfg.frames, cfg.loss.pairs, seed)?;
    let refs = if cfg.loss.all_references {
        References::All
    } else {
        References::sample(pairs.pairs.len(), cfg.groups, cfg.group_size(), seed)
    };
    Ok((pairs, refs))
}

#[derive(Clone, Debug)]
pub struct Stp4d {
    pub cfg: PipelineConfig,
    pub store: ParameterStore,
    pub prompt: PromptConditioner,
    pub denoiser: Denoiser,
    pub gie: Gie,
    pub ted: Ted,
    pub sched: DiffusionSchedule,
}

impl Stp4d {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Init::new(cfg.seed);
        let attn = AttentionConfig::new(cfg.model_dim, cfg.heads)?;
        let n = cfg.group_size();
        let prompt = PromptConditioner::new(&mut store, &mut init, "tpe", attn, cfg.prompt.frame_restricted)?;
        let denoiser = Denoiser::new(&mut store, &mut init, "denoiser", n * D, attn, cfg.depth)?;
        let gie = Gie::new(
            &mut store,
            &mut init,
            "gie",
            GieConfig {
                t_a: cfg.anchor_frames,
                groups: cfg.groups,
                n,
                d: D,
                model_dim: cfg.model_dim,
                heads: cfg.heads,
                hidden: cfg.gie.hidden,
                hidden_heads: cfg.gie.heads,
                window: (cfg.gie.window[0], cfg.gie.window[1]),
                depth: cfg.gie.depth,
                n_plus: cfg.gie.n_plus,
                pad: cfg.gie.pad,
            },
        )?;
        let ratio = ExtensionRatio::new(cfg.frames, cfg.anchor_frames)?;
        let ted = Ted::new(&mut store, &mut init, "ted", ratio, cfg.groups, n, D, attn, cfg.seed ^ 0x7ed0_0001)?;
        let sched = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Self { cfg, store, prompt, denoiser, gie, ted, sched })
    }

    /// Noise tokens and unit text embedding to raw `𝒢^STP`.
    pub fn forward<'g>(&self, g: &'g Graph, p: &Bindings<'g>, noise: &Tensor, e: &[f64]) -> Result<ForwardOutput<'g>> {
        let c = &self.cfg;
        if e.len() != c.model_dim {
            return Err(Error::Dimension(format!("prompt embedding has dimension {}, model width {}", e.len(), c.model_dim)));
        }
        let e_tilde = self.prompt.time_varying(g, p, e, c.anchor_frames)?;
        let x = g.constant(noise.clone());
        let sampled = sample(g, p, &x, &e_tilde, &self.prompt, &self.denoiser, &self.sched)?;
        let enhanced = self.gie.forward(g, p, &sampled)?.tokens;
        let extended = self.ted.extend(p, &enhanced)?;
        let offset = g.constant(Tensor::new([D], attribute_offset().to_vec())?);
        let raw = extended.reshape([c.frames * c.groups * c.group_size(), D])?.add_row(&offset)?.reshape([
            c.frames,
            c.groups,
            c.group_size(),
            D,
        ])?;
        Ok(ForwardOutput { e_tilde, sampled, enhanced, raw })
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { background: self.cfg.view.background, geometric_grads: self.cfg.view.geometric_grads }
    }

    /// Activates raw `[T, G, N, D]` Gaussians and renders one image per frame.
    pub fn render<'g>(&self, raw: &Var<'g>, cams: &[Camera]) -> Result<Rendered<'g>> {
        let s = raw.shape().to_vec();
        if s.len() != 4 || s[3] != D {
            return Err(Error::Dimension(format!("expected [T, G, N, {D}] Gaussians, got {s:?}")));
        }
        let (t, count) = (s[0], s[1] * s[2]);
        let cams = cameras_for(cams, t)?;
        let attrs = activate_var(raw)?;
        let flat = attrs.reshape([t, count, D])?;
        let mut frames = Vec::with_capacity(t);
        for (f, cam) in cams.iter().enumerate() {
            let img = render_var(&flat.narrow(0, f, 1)?.reshape([count, D])?, cam, self.render_options())?;
            let hw = img.shape().to_vec();
            frames.push(img.reshape([1, hw[0], hw[1], 3])?);
        }
        let video = Var::concat(&frames.iter().collect::<Vec<_>>(), 0)?;
        Ok(Rendered { attrs, video })
    }

    /// The five losses against ground truth `[T, H, W, 3]`, fused.
    pub fn losses<'g>(
        &self,
        rendered: &Rendered<'g>,
        gt: &Tensor,
        text: &[f64],
        models: &LossModels,
        sampling_seed: u64,
    ) -> Result<(Var<'g>, LossReport)> {
        let c = &self.cfg;
        let g = rendered.video.graph();
        let l_ssim = losses::loss_ssim_var(&rendered.video, &g.constant(gt.clone()))?;
        let positions = rendered.attrs.narrow(3, 0, 3)?;
        let (pairs, refs) = rigidity_sampling(c, sampling_seed)?;
        let l_rig = losses::loss_rigidity_var(&positions, &pairs, &refs)?;
        let l_fvd = losses::loss_fvd_var(&rendered.video, gt, &models.fvd)?;
        let s = rendered.attrs.shape().to_vec();
        let traj = rendered.attrs.reshape([s[0], s[1] * s[2], D])?;
        let traj = if c.loss.smooth_all_channels { traj } else { traj.narrow(2, 0, 3)? };
        let l_smooth = losses::loss_smooth_var(&traj)?;
        let l_clip = losses::loss_clip_var(&rendered.video, text, &models.clip)?;
        losses::fuse_var([&l_ssim, &l_rig, &l_fvd, &l_smooth, &l_clip], &c.loss.weights)
    }

    /// Raw `[T, G, N, D]` Gaussians without recording a tape.
    pub fn generate_raw(&self, noise: &Tensor, e: &[f64]) -> Result<Tensor> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        Ok(self.forward(&g, &p, noise, e)?.raw.value().clone())
    }

    /// Parameter records for a checkpoint.
    pub fn records(&self) -> BTreeMap<String, Tensor> {
        self.store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    /// Copies every parameter from `records`; names missing from the records
    /// or carrying a different shape are reported together.
    pub fn load_records(&mut self, records: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut bad = Vec::new();
        for (name, p) in self.store.iter() {
            match records.get(name) {
                Some(t) if t.shape() == p.shape() => {}
                Some(t) => bad.push(format!("{name} (expected {:?}, found {:?})", p.shape(), t.shape())),
                None => bad.push(format!("{name} (missing)")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::IncompatibleCheckpoint(bad));
        }
        let names: Vec<String> = self.store.names().map(str::to_string).collect();
        for name in names {
            self.store.set(&name, records[&name].clone())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
        let records = checkpoint::load(path)?;
        self.load_records(&records)?;
        Ok(records)
    }

    pub fn round_f32(&mut self) -> Result<()> {
        let names: Vec<String> = self.store.names().map(str::to_string).collect();
        for name in names {
            let mut t = self.store.get(&name).expect("listed name").clone();
            checkpoint::round_f32(&mut t);
            self.store.set(&name, t)?;
        }
        Ok(())
    }
}
