//! The training loop: one asset per step, rendered-output losses, AdamW.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::Camera;
use crate::config::PipelineConfig;
use crate::dataset::{resample, stack_frames, AssetRecord};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{noise_input, LossModels, NoiseInput, Stp4d};
use crate::nn::{checkpoint, Graph};
use crate::optim::AdamW;
use crate::prompt::TextEncoder;
use crate::tensor::Tensor;

/// Camera intrinsics rescaled to a new image size.
pub fn rescale_camera(cam: &Camera, size: [usize; 2]) -> Camera {
    if cam.width == size[0] && cam.height == size[1] {
        return cam.clone();
    }
    let sx = size[0] as f64 / cam.width as f64;
    let sy = size[1] as f64 / cam.height as f64;
    Camera { fx: cam.fx * sx, fy: cam.fy * sy, cx: cam.cx * sx, cy: cam.cy * sy, width: size[0], height: size[1], ..cam.clone() }
}

/// Everything a training step needs about one asset, decoded once.
#[derive(Clone, Debug)]
pub struct AssetTarget {
    pub record: AssetRecord,
    /// `[T, H, W, 3]` ground-truth frames resampled to the configured count.
    pub video: Tensor,
    pub cameras: Vec<Camera>,
    pub text: Vec<f64>,
    pub noise: NoiseInput,
}

pub fn prepare_target(cfg: &PipelineConfig, encoder: &TextEncoder, record: &AssetRecord) -> Result<AssetTarget> {
    let frames = resample(&record.load_frames(cfg.image_size)?, cfg.frames);
    let cams: Vec<Camera> = record.load_cameras()?.iter().map(|c| rescale_camera(c, cfg.image_size)).collect();
    let cameras = if cams.len() == 1 { cams } else { resample(&cams, cfg.frames) };
    Ok(AssetTarget {
        video: stack_frames(&frames)?,
        cameras,
        text: encoder.encode(&record.caption)?.values,
        noise: noise_input(cfg, record.noise_seed())?,
        record: record.clone(),
    })
}

pub fn prepare_targets(cfg: &PipelineConfig, dataset: &[AssetRecord]) -> Result<Vec<AssetTarget>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let encoder = TextEncoder::new(cfg.prompt.clone(), cfg.model_dim);
    dataset.iter().map(|r| prepare_target(cfg, &encoder, r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub step: usize,
    pub l_ssim: f64,
    pub l_rig: f64,
    pub l_fvd: f64,
    pub l_smooth: f64,
    pub l_clip: f64,
    pub total: f64,
}

impl LogLine {
    pub fn new(step: usize, r: &LossReport) -> Self {
        Self { step, l_ssim: r.l_ssim, l_rig: r.l_rig, l_fvd: r.l_fvd, l_smooth: r.l_smooth, l_clip: r.l_clip, total: r.total }
    }
}

pub struct Trainer {
    pub model: Stp4d,
    pub adam: AdamW,
    pub targets: Vec<AssetTarget>,
    pub loss_models: LossModels,
}

impl Trainer {
    pub fn new(cfg: PipelineConfig, dataset: &[AssetRecord]) -> Result<Self> {
        let targets = prepare_targets(&cfg, dataset)?;
        let loss_models = LossModels::new(&cfg);
        let mut model = Stp4d::new(cfg)?;
        model.round_f32()?;
        Ok(Self { model, adam: AdamW::default(), targets, loss_models })
    }

    /// Completed optimizer steps.
    pub fn steps_done(&self) -> usize {
        self.adam.step as usize
    }

    /// Asset trained at 0-based iteration `step`.
    pub fn asset_for_step(&self, step: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.random_range(0..self.targets.len())
    }

    /// Loss of the current parameters on one asset, without updating.
    pub fn evaluate_step(&self, step: usize) -> Result<LossReport> {
        let target = &self.targets[self.asset_for_step(step)];
        let g = Graph::inference();
        let p = self.model.store.bind(&g);
        let out = self.model.forward(&g, &p, &target.noise.tokens, &target.text)?;
        let rendered = self.model.render(&out.raw, &target.cameras)?;
        let seed = self.model.cfg.seed.wrapping_add(step as u64);
        Ok(self.model.losses(&rendered, &target.video, &target.text, &self.loss_models, seed)?.1)
    }

    /// One forward/backward/update; returns the losses before the update.
    pub fn step(&mut self) -> Result<LossReport> {
        let step = self.steps_done();
        let target = &self.targets[self.asset_for_step(step)];
        let g = Graph::new();
        let p = self.model.store.bind(&g);
        let out = self.model.forward(&g, &p, &target.noise.tokens, &target.text)?;
        let rendered = self.model.render(&out.raw, &target.cameras)?;
        let seed = self.model.cfg.seed.wrapping_add(step as u64);
        let (total, report) = self.model.losses(&rendered, &target.video, &target.text, &self.loss_models, seed)?;
        let grads = g.backward(&total)?;
        self.model.store.zero_grads();
        self.model.store.accumulate_grads(&p, &grads);
        drop(p);
        let opt = self.model.cfg.optimizer.clone();
        self.adam.update(&mut self.model.store, opt.lr_at(step), &opt)?;
        self.model.round_f32()?;
        self.adam.round_f32();
        Ok(report)
    }

    pub fn checkpoint_records(&self) -> std::collections::BTreeMap<String, Tensor> {
        let mut r = self.model.records();
        r.extend(self.adam.records());
        r
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_records())
    }

    /// Restores parameters and optimizer state.
    pub fn resume(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = self.model.load_checkpoint(path)?;
        self.adam = AdamW::from_records(&records);
        Ok(())
    }

    /// Runs until `iterations` steps are done, logging one JSON line per step.
    pub fn run(&mut self, iterations: usize, mut log: Option<&mut dyn Write>, ckpt_dir: Option<&Path>) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        let every = self.model.cfg.checkpoint_every;
        while self.steps_done() < iterations {
            let report = self.step()?;
            let done = self.steps_done();
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&LogLine::new(done, &report))?)?;
                w.flush()?;
            }
            log::info!("step {done}: total {:.6}", report.total);
            if let (Some(dir), true) = (ckpt_dir, every > 0 && done % every == 0) {
                self.save_checkpoint(dir.join(format!("step_{done:06}.ckpt")))?;
            }
            reports.push(report);
        }
        Ok(reports)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains for the configured iteration count, writing `loss.jsonl`,
/// periodic checkpoints and `final.ckpt` under the output directory.
pub fn train(cfg: &PipelineConfig, dataset: &[AssetRecord], resume: Option<&Path>) -> Result<TrainSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut trainer = Trainer::new(cfg.clone(), dataset)?;
    if let Some(r) = resume {
        trainer.resume(r)?;
    }
    let log_path = cfg.out_dir.join("loss.jsonl");
    let mut file = std::fs::OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(&log_path)?;
    let reports = trainer.run(cfg.optimizer.iterations, Some(&mut file), Some(&cfg.out_dir))?;
    let checkpoint = cfg.out_dir.join("final.ckpt");
    trainer.save_checkpoint(&checkpoint)?;
    Ok(TrainSummary { reports, checkpoint, log: log_path })
}
