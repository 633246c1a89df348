use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use stp4d::camera::Camera;
use stp4d::config::PipelineConfig;
use stp4d::dataset::{make_toy_data, ToyDataOptions};
use stp4d::generate::generate;
use stp4d::model::Stp4d;
use stp4d::ply::{save_ply, PlyFormat};
use stp4d::renderer::render_frame;
use stp4d::train::Trainer;
use stp4d_ffi::*;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::desk();
    c.data_dir = Some(dir.to_path_buf());
    c.out_dir = dir.join("runs");
    c.n_total = 8;
    c.groups = 2;
    c.anchor_frames = 2;
    c.frames = 4;
    c.model_dim = 8;
    c.heads = 2;
    c.depth = 1;
    c.steps = 2;
    c.image_size = [8, 8];
    c.gie.depth = 1;
    c.gie.hidden = 4;
    c.gie.heads = 2;
    c.gie.n_plus = 5;
    c.loss.pairs = 2;
    c
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = stp4d_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn camera(c: &Camera) -> Stp4dCamera {
    Stp4dCamera { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, r: c.r, t: c.t, width: c.width, height: c.height }
}

#[test]
fn ddim_step_matches_the_closed_form() {
    let (ab_t, ab_prev) = (0.3, 0.7);
    let x_t = [0.5, -1.2, 2.0];
    let x0 = [0.1, 0.4, -0.8];
    let mut out = [0.0; 3];
    assert_eq!(unsafe { stp4d_ddim_step(ab_t, ab_prev, x_t.as_ptr(), x0.as_ptr(), 3, out.as_mut_ptr()) }, Stp4dStatus::Ok);
    for i in 0..3 {
        let eps = (x_t[i] - f64::sqrt(ab_t) * x0[i]) / f64::sqrt(1.0 - ab_t);
        let want = f64::sqrt(ab_prev) * x0[i] + f64::sqrt(1.0 - ab_prev) * eps;
        assert!((out[i] - want).abs() < 1e-12);
    }
    assert!(stp4d_last_error().is_null());
}

#[test]
fn ddim_step_reports_bad_arguments() {
    let x = [0.0; 2];
    let mut out = [0.0; 2];
    let s = unsafe { stp4d_ddim_step(0.5, 0.7, ptr::null(), x.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(s, Stp4dStatus::NullPointer);
    assert!(last_error().contains("null"));
    // Noise level outside (0, 1) is rejected by the core crate.
    let s = unsafe { stp4d_ddim_step(1.5, 0.7, x.as_ptr(), x.as_ptr(), 2, out.as_mut_ptr()) };
    assert_ne!(s, Stp4dStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn pipeline_generates_the_same_frames_as_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let cfg_path = dir.path().join("tiny.json");
    cfg.save(&cfg_path).unwrap();

    let mut pipe = ptr::null_mut();
    assert_eq!(unsafe { stp4d_pipeline_open(cstr(&cfg_path).as_ptr(), ptr::null(), &mut pipe) }, Stp4dStatus::Ok);
    let prompt = CString::new("a red ball bouncing").unwrap();
    let mut asset = ptr::null_mut();
    assert_eq!(unsafe { stp4d_generate(pipe, prompt.as_ptr(), 7, &mut asset) }, Stp4dStatus::Ok);
    let frames = unsafe { stp4d_asset_frames(asset) };
    let gaussians = unsafe { stp4d_asset_gaussians(asset) };
    assert_eq!((frames, gaussians), (4, 8));

    let want = generate(&Stp4d::new(cfg).unwrap(), "a red ball bouncing", 7).unwrap();
    let mut buf = vec![0.0; gaussians * STP4D_ATTRIBUTES];
    for t in 0..frames {
        assert_eq!(unsafe { stp4d_asset_copy_frame(asset, t, buf.as_mut_ptr(), buf.len()) }, Stp4dStatus::Ok);
        assert_eq!(buf, want.frames[t].data());
    }
    assert_eq!(unsafe { stp4d_asset_copy_frame(asset, frames, buf.as_mut_ptr(), buf.len()) }, Stp4dStatus::InvalidArgument);
    assert_eq!(unsafe { stp4d_asset_copy_frame(asset, 0, buf.as_mut_ptr(), buf.len() - 1) }, Stp4dStatus::BufferTooSmall);

    let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], 45.0, 6, 5);
    let bg = [0.1, 0.2, 0.3];
    let mut img = vec![0.0; 6 * 5 * 3];
    assert_eq!(unsafe { stp4d_asset_render(asset, 2, &camera(&cam), bg.as_ptr(), img.as_mut_ptr(), img.len()) }, Stp4dStatus::Ok);
    assert_eq!(img, render_frame(&want.frames[2], &cam, bg).unwrap().data());

    let out = dir.path().join("ply");
    assert_eq!(unsafe { stp4d_asset_write_ply(asset, cstr(&out).as_ptr()) }, Stp4dStatus::Ok);
    assert!(out.join("frame_0003.ply").is_file());

    unsafe {
        stp4d_asset_free(asset);
        stp4d_pipeline_free(pipe);
        stp4d_asset_free(ptr::null_mut());
        stp4d_pipeline_free(ptr::null_mut());
    }
}

#[test]
fn pipeline_loads_trained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let recs = make_toy_data(dir.path(), &ToyDataOptions { assets: 2, seed: 1, frames: 4, size: [8, 8], dim: 8, radius: 4.0 }).unwrap();
    let cfg = tiny(dir.path());
    let cfg_path = dir.path().join("tiny.json");
    cfg.save(&cfg_path).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), &recs).unwrap();
    trainer.run(2, None, None).unwrap();
    let ckpt = dir.path().join("t.ckpt");
    trainer.save_checkpoint(&ckpt).unwrap();

    let mut pipe = ptr::null_mut();
    assert_eq!(unsafe { stp4d_pipeline_open(cstr(&cfg_path).as_ptr(), cstr(&ckpt).as_ptr(), &mut pipe) }, Stp4dStatus::Ok);
    let mut asset = ptr::null_mut();
    let prompt = CString::new(recs[0].caption.as_str()).unwrap();
    assert_eq!(unsafe { stp4d_generate(pipe, prompt.as_ptr(), 3, &mut asset) }, Stp4dStatus::Ok);
    let want = generate(&trainer.model, &recs[0].caption, 3).unwrap();
    let mut buf = vec![0.0; 8 * STP4D_ATTRIBUTES];
    assert_eq!(unsafe { stp4d_asset_copy_frame(asset, 1, buf.as_mut_ptr(), buf.len()) }, Stp4dStatus::Ok);
    assert_eq!(buf, want.frames[1].data());
    unsafe {
        stp4d_asset_free(asset);
        stp4d_pipeline_free(pipe);
    }
}

#[test]
fn open_failures_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut pipe = ptr::null_mut();
    let missing = cstr(&dir.path().join("missing.json"));
    let s = unsafe { stp4d_pipeline_open(missing.as_ptr(), ptr::null(), &mut pipe) };
    assert_ne!(s, Stp4dStatus::Ok);
    assert!(pipe.is_null());
    assert!(last_error().contains("missing.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_total": 7, "groups": 2}"#).unwrap();
    assert_eq!(unsafe { stp4d_pipeline_open(cstr(&bad).as_ptr(), ptr::null(), &mut pipe) }, Stp4dStatus::Config);

    let cfg_path = dir.path().join("tiny.json");
    tiny(dir.path()).save(&cfg_path).unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let s = unsafe { stp4d_pipeline_open(cstr(&cfg_path).as_ptr(), cstr(&ckpt).as_ptr(), &mut pipe) };
    assert_ne!(s, Stp4dStatus::Ok);
    assert!(pipe.is_null());

    assert_eq!(unsafe { stp4d_pipeline_open(ptr::null(), ptr::null(), &mut pipe) }, Stp4dStatus::NullPointer);
    let mut asset = ptr::null_mut();
    let prompt = CString::new("x").unwrap();
    assert_eq!(unsafe { stp4d_generate(ptr::null(), prompt.as_ptr(), 0, &mut asset) }, Stp4dStatus::NullPointer);
    assert_eq!(unsafe { stp4d_asset_frames(ptr::null()) }, 0);
}

#[test]
fn ply_files_render_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let asset = generate(&Stp4d::new(tiny(dir.path())).unwrap(), "a lamp", 1).unwrap();
    let path = dir.path().join("frame_0000.ply");
    save_ply(&path, &asset.frames[0], PlyFormat::BinaryLittleEndian).unwrap();
    let reread = stp4d::ply::load_ply(&path).unwrap();
    let cam = Camera::look_at([1.0, 0.5, -4.0], [0.0; 3], 50.0, 7, 9);
    let bg = [1.0, 1.0, 1.0];
    let mut img = vec![0.0; 7 * 9 * 3];
    let s = unsafe { stp4d_render_ply(cstr(&path).as_ptr(), &camera(&cam), bg.as_ptr(), img.as_mut_ptr(), img.len()) };
    assert_eq!(s, Stp4dStatus::Ok);
    assert_eq!(img, render_frame(&reread, &cam, bg).unwrap().data());

    let mut small = vec![0.0; 10];
    let s = unsafe { stp4d_render_ply(cstr(&path).as_ptr(), &camera(&cam), bg.as_ptr(), small.as_mut_ptr(), small.len()) };
    assert_eq!(s, Stp4dStatus::BufferTooSmall);
    let mut flat = camera(&cam);
    flat.width = 0;
    let s = unsafe { stp4d_render_ply(cstr(&path).as_ptr(), &flat, bg.as_ptr(), img.as_mut_ptr(), img.len()) };
    assert_ne!(s, Stp4dStatus::Ok);
}

#[test]
fn header_declares_the_exported_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stp4d.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "stp4d_last_error",
        "stp4d_ddim_step",
        "stp4d_pipeline_open",
        "stp4d_pipeline_free",
        "stp4d_generate",
        "stp4d_asset_free",
        "stp4d_asset_frames",
        "stp4d_asset_gaussians",
        "stp4d_asset_copy_frame",
        "stp4d_asset_write_ply",
        "stp4d_asset_render",
        "stp4d_render_ply",
        "typedef struct Stp4dPipeline Stp4dPipeline",
        "typedef struct Stp4dAsset Stp4dAsset",
        "STP4D_STATUS_BUFFER_TOO_SMALL = 9",
        "#define STP4D_ATTRIBUTES 14",
    ] {
        assert!(text.contains(name), "header is missing {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"stp4d.h\"\nint main(void) { double x = 1.0, out; return stp4d_ddim_step(0.5, 0.7, &x, &x, 1, &out) == STP4D_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match std::process::Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(header.parent().unwrap()).arg(&src).status() {
        Ok(status) => assert!(status.success(), "header does not compile as C"),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}
