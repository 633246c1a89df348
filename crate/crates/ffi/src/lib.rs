//! C interface to the stp4d generator.
//!
//! Every function returns a [`Stp4dStatus`]. On failure the message is kept
//! per thread and read back with [`stp4d_last_error`]. Handles are opaque and
//! must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stp4d::camera::Camera;
use stp4d::config::PipelineConfig;
use stp4d::diffusion::ddim_step_scalar;
use stp4d::gaussians::D;
use stp4d::generate::{generate, Asset};
use stp4d::model::Stp4d;
use stp4d::ply::{frame_name, load_ply, save_ply, PlyFormat};
use stp4d::renderer::render_frame;
use stp4d::{Error, Tensor};

/// Number of attributes stored per Gaussian.
pub const STP4D_ATTRIBUTES: usize = 14;
const _: () = assert!(STP4D_ATTRIBUTES == D);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stp4dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Checkpoint = 5,
    Io = 6,
    Parse = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Internal = 10,
    Panic = 11,
}

/// Pinhole camera. `r` is the row-major world-to-camera rotation.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct Stp4dCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl From<&Stp4dCamera> for Camera {
    fn from(c: &Stp4dCamera) -> Self {
        Camera { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, r: c.r, t: c.t, width: c.width, height: c.height }
    }
}

/// A configured model with loaded parameters.
pub struct Stp4dPipeline {
    model: Stp4d,
}

/// A generated sequence of Gaussian frames.
pub struct Stp4dAsset {
    asset: Asset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(Stp4dStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => Stp4dStatus::Config,
            Error::Dimension(_) | Error::Layout(_) => Stp4dStatus::Dimension,
            Error::Checkpoint(_) | Error::IncompatibleCheckpoint(_) => Stp4dStatus::Checkpoint,
            Error::Io(_) | Error::Image(_) => Stp4dStatus::Io,
            Error::Parse { .. } | Error::Json(_) => Stp4dStatus::Parse,
            Error::NonFinite(_) => Stp4dStatus::NonFinite,
            _ => Stp4dStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn context(e: Error, path: &str) -> Failure {
    let Failure(status, msg) = e.into();
    Failure(status, format!("{path}: {msg}"))
}

fn fail<T>(status: Stp4dStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Stp4dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Stp4dStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            set_error(format!("panic: {}", msg.unwrap_or_default()));
            Stp4dStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(Stp4dStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(Stp4dStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return fail(Stp4dStatus::NullPointer, format!("{what} is null"));
    }
    if len < need {
        return fail(Stp4dStatus::BufferTooSmall, format!("{what} holds {len} values, {need} needed"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn render_into(attrs: &Tensor, camera: *const Stp4dCamera, background: *const f64, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if camera.is_null() || background.is_null() {
        return fail(Stp4dStatus::NullPointer, "camera or background is null");
    }
    let cam = Camera::from(unsafe { &*camera });
    cam.validate()?;
    let bg = unsafe { [*background, *background.add(1), *background.add(2)] };
    let img = render_frame(attrs, &cam, bg)?;
    let dst = unsafe { out_slice(out, out_len, img.numel(), "output image")? };
    dst.copy_from_slice(img.data());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stp4d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// One deterministic DDIM update applied elementwise over `len` values.
///
/// # Safety
/// `x_t`, `x0` and `out` must point to `len` doubles. `out` may alias `x_t`.
#[no_mangle]
pub unsafe extern "C" fn stp4d_ddim_step(alpha_bar_t: f64, alpha_bar_prev: f64, x_t: *const f64, x0: *const f64, len: usize, out: *mut f64) -> Stp4dStatus {
    guard(|| {
        if x_t.is_null() || x0.is_null() || out.is_null() {
            return fail(Stp4dStatus::NullPointer, "x_t, x0 and out must be non-null");
        }
        for i in 0..len {
            let v = ddim_step_scalar(alpha_bar_t, alpha_bar_prev, *x_t.add(i), *x0.add(i))?;
            *out.add(i) = v;
        }
        Ok(())
    })
}

/// Loads a pipeline config and, when `checkpoint` is non-null, its trained
/// parameters.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stp4d_pipeline_open(config: *const c_char, checkpoint: *const c_char, out: *mut *mut Stp4dPipeline) -> Stp4dStatus {
    guard(|| {
        if out.is_null() {
            return fail(Stp4dStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let config = str_arg(config, "config")?;
        let cfg = PipelineConfig::load(config).map_err(|e| context(e, config))?;
        let mut model = Stp4d::new(cfg)?;
        if !checkpoint.is_null() {
            let checkpoint = str_arg(checkpoint, "checkpoint")?;
            model.load_checkpoint(PathBuf::from(checkpoint)).map_err(|e| context(e, checkpoint))?;
        }
        *out = Box::into_raw(Box::new(Stp4dPipeline { model }));
        Ok(())
    })
}

/// # Safety
/// `pipeline` must come from [`stp4d_pipeline_open`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stp4d_pipeline_free(pipeline: *mut Stp4dPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Generates an asset for `prompt`. Deterministic in (parameters, prompt, seed).
///
/// # Safety
/// `pipeline` must be a live handle, `prompt` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stp4d_generate(pipeline: *const Stp4dPipeline, prompt: *const c_char, seed: u64, out: *mut *mut Stp4dAsset) -> Stp4dStatus {
    guard(|| {
        if pipeline.is_null() || out.is_null() {
            return fail(Stp4dStatus::NullPointer, "pipeline and out must be non-null");
        }
        *out = ptr::null_mut();
        let asset = generate(&(*pipeline).model, str_arg(prompt, "prompt")?, seed)?;
        *out = Box::into_raw(Box::new(Stp4dAsset { asset }));
        Ok(())
    })
}

/// # Safety
/// `asset` must come from [`stp4d_generate`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stp4d_asset_free(asset: *mut Stp4dAsset) {
    if !asset.is_null() {
        drop(Box::from_raw(asset));
    }
}

/// # Safety
/// `asset` must be a live handle or null (gives 0).
#[no_mangle]
pub unsafe extern "C" fn stp4d_asset_frames(asset: *const Stp4dAsset) -> usize {
    asset.as_ref().map_or(0, |a| a.asset.frame_count())
}

/// # Safety
/// `asset` must be a live handle or null (gives 0).
#[no_mangle]
pub unsafe extern "C" fn stp4d_asset_gaussians(asset: *const Stp4dAsset) -> usize {
    asset.as_ref().and_then(|a| a.asset.frames.first()).map_or(0, |f| f.shape()[0])
}

/// Copies the activated attributes of `frame` (`gaussians × STP4D_ATTRIBUTES`,
/// row-major) into `out`.
///
/// # Safety
/// `asset` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn stp4d_asset_copy_frame(asset: *const Stp4dAsset, frame: usize, out: *mut f64, out_len: usize) -> Stp4dStatus {
    guard(|| {
        let a = asset.as_ref().map_or_else(|| fail(Stp4dStatus::NullPointer, "asset is null"), Ok)?;
        let Some(f) = a.asset.frames.get(frame) else {
            return fail(Stp4dStatus::InvalidArgument, format!("frame {frame} out of range (asset has {})", a.asset.frame_count()));
        };
        out_slice(out, out_len, f.numel(), "out")?.copy_from_slice(f.data());
        Ok(())
    })
}

/// Writes `frame_NNNN.ply` files for every frame into `dir`.
///
/// # Safety
/// `asset` must be a live handle and `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stp4d_asset_write_ply(asset: *const Stp4dAsset, dir: *const c_char) -> Stp4dStatus {
    guard(|| {
        let a = asset.as_ref().map_or_else(|| fail(Stp4dStatus::NullPointer, "asset is null"), Ok)?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        for (t, f) in a.asset.frames.iter().enumerate() {
            save_ply(dir.join(frame_name(t, "ply")), f, PlyFormat::BinaryLittleEndian)?;
        }
        Ok(())
    })
}

/// Renders one frame of an asset to `height × width × 3` RGB values in [0, 1].
///
/// # Safety
/// Pointers must be valid; `background` points to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn stp4d_asset_render(
    asset: *const Stp4dAsset,
    frame: usize,
    camera: *const Stp4dCamera,
    background: *const f64,
    out: *mut f64,
    out_len: usize,
) -> Stp4dStatus {
    guard(|| {
        let a = asset.as_ref().map_or_else(|| fail(Stp4dStatus::NullPointer, "asset is null"), Ok)?;
        let Some(f) = a.asset.frames.get(frame) else {
            return fail(Stp4dStatus::InvalidArgument, format!("frame {frame} out of range (asset has {})", a.asset.frame_count()));
        };
        render_into(f, camera, background, out, out_len)
    })
}

/// Renders a PLY frame file to `height × width × 3` RGB values in [0, 1].
///
/// # Safety
/// Pointers must be valid; `background` points to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn stp4d_render_ply(path: *const c_char, camera: *const Stp4dCamera, background: *const f64, out: *mut f64, out_len: usize) -> Stp4dStatus {
    guard(|| {
        let attrs = load_ply(str_arg(path, "path")?)?;
        render_into(&attrs, camera, background, out, out_len)
    })
}
