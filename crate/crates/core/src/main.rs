use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use stp4d::camera::read_cameras;
use stp4d::config::PipelineConfig;
use stp4d::dataset::{load_dataset, make_toy_data, ToyDataOptions};
use stp4d::eval::{copy_check, evaluate};
use stp4d::generate::{export, generate, render_frames};
use stp4d::model::{LossModels, Stp4d};
use stp4d::nn::checkpoint;
use stp4d::ply::{frame_name, load_ply_dir};
use stp4d::prompt::EncoderBackend;
use stp4d::train::{prepare_targets, train};
use stp4d::{dataset, imageio};

#[derive(Parser)]
#[command(name = "stp4d", version, about = "Text-to-4D Gaussian splatting on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the dataset named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Generate a 4D asset from a prompt.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Camera file; defaults to the configured orbit.
        #[arg(long)]
        cameras: Option<PathBuf>,
    },
    /// Render a directory of per-frame PLYs.
    Render {
        #[arg(long)]
        ply_dir: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
        background: Vec<f64>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seeds for the faithful vs frame-scrambled copy check.
        #[arg(long, default_value_t = 10)]
        copy_seeds: u64,
    },
    /// Print the parameter table of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write a procedural moving-blob dataset and a matching config.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        assets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Embedding width (must equal the model width).
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STP4D_THREADS") {
        let n: usize = v.parse().with_context(|| format!("STP4D_THREADS={v} is not a thread count"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn model_from(config: &Path, ckpt: &Path) -> Result<Stp4d> {
    let cfg = PipelineConfig::load(config)?;
    let mut model = Stp4d::new(cfg)?;
    model.load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, iterations } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(n) = iterations {
                cfg.optimizer.iterations = n;
            }
            let data = cfg.data_dir.clone().context("config has no data_dir")?;
            let assets = load_dataset(&data)?;
            let summary = train(&cfg, &assets, resume.as_deref())?;
            let first = summary.reports.first().map(|r| r.total).unwrap_or(f64::NAN);
            let last = summary.reports.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps on {} assets; total loss {first:.5} -> {last:.5}; checkpoint {}; log {}",
                summary.reports.len(),
                assets.len(),
                summary.checkpoint.display(),
                summary.log.display()
            );
        }
        Command::Generate { config, ckpt, prompt, seed, out, cameras } => {
            let model = model_from(&config, &ckpt)?;
            let cams = match cameras {
                Some(p) => read_cameras(p)?,
                None => model.cfg.default_cameras(),
            };
            let mut asset = generate(&model, &prompt, seed)?;
            export(&mut asset, &cams, model.cfg.view.background, &out)?;
            println!("{}", serde_json::to_string_pretty(&asset.timing)?);
        }
        Command::Render { ply_dir, cameras, out, background } => {
            let frames = load_ply_dir(&ply_dir)?;
            if frames.is_empty() {
                bail!("no PLY files in {}", ply_dir.display());
            }
            let cams = read_cameras(&cameras)?;
            let bg = [background[0], background[1], background[2]];
            let images = render_frames(&frames, &cams, bg)?;
            std::fs::create_dir_all(&out)?;
            for (t, img) in images.iter().enumerate() {
                imageio::save_png(out.join(frame_name(t, "png")), img)?;
            }
            imageio::save_gif(out.join("animation.gif"), &images, 100)?;
            println!("rendered {} frames to {}", images.len(), out.display());
        }
        Command::Eval { config, ckpt, data, copy_seeds } => {
            let mut model = model_from(&config, &ckpt)?;
            if let Some(d) = data {
                model.cfg.data_dir = Some(d);
            }
            let root = model.cfg.data_dir.clone().context("no dataset given")?;
            let targets = prepare_targets(&model.cfg, &load_dataset(&root)?)?;
            let report = evaluate(&model, &targets)?;
            let videos: Vec<_> = targets.iter().map(|t| t.video.clone()).collect();
            let seeds: Vec<u64> = (0..copy_seeds).collect();
            let check = copy_check(&videos, &seeds, &LossModels::new(&model.cfg))?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "metrics": report, "copy_check": check }))?);
        }
        Command::Inspect { ckpt } => {
            let records = checkpoint::load(&ckpt)?;
            let mut total = 0;
            println!("{:<48} {:>16} {:>10}", "name", "shape", "count");
            for (name, t) in &records {
                let shape = format!("{:?}", t.shape());
                println!("{name:<48} {shape:>16} {:>10}", t.numel());
                total += t.numel();
            }
            println!("{} records, {total} values", records.len());
        }
        Command::MakeToyData { out, assets, seed, dim, frames, size } => {
            let opts = ToyDataOptions { assets, seed, frames, size: [size, size], dim, ..ToyDataOptions::default() };
            let records = make_toy_data(&out, &opts)?;
            let mut cfg = PipelineConfig::desk();
            cfg.data_dir = Some(PathBuf::from("."));
            cfg.out_dir = PathBuf::from(dataset::RESERVED_DIRS[1]).join("desk");
            cfg.model_dim = dim;
            cfg.image_size = [size, size];
            cfg.prompt.backend = EncoderBackend::File;
            cfg.prompt.embedding_dir = Some(PathBuf::from(dataset::RESERVED_DIRS[0]));
            cfg.save(out.join("desk.json"))?;
            for r in &records {
                println!("{}: {}", r.id, r.caption);
            }
            println!("wrote {} assets and {}", records.len(), out.join("desk.json").display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
