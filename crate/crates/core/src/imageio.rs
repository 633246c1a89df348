//! PNG frames and animated GIF export.

use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbImage, RgbaImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_rgb(img: &Tensor) -> Result<RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!("expected [H, W, 3] image, got {s:?}")));
    }
    let bytes = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes).expect("buffer size matches"))
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]` as 8-bit RGB PNG.
pub fn save_png(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    to_rgb(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads any supported image as `[H, W, 3]` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new([h as usize, w as usize, 3], img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
}

pub fn save_gif(path: impl AsRef<Path>, frames: &[Tensor], delay_ms: u32) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = GifEncoder::new_with_speed(file, 10);
    enc.set_repeat(Repeat::Infinite)?;
    for f in frames {
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(to_rgb(f)?).to_rgba8();
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(delay_ms, 1)))?;
    }
    Ok(())
}

/// Bilinear resize of an `[H, W, 3]` image (pixel-center aligned).
pub fn resize(img: &Tensor, width: usize, height: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!("expected [H, W, 3] image, got {s:?}")));
    }
    let (h0, w0) = (s[0], s[1]);
    if (h0, w0) == (height, width) {
        return Ok(img.clone());
    }
    let d = img.data();
    let sample = |y: f64, x: f64, c: usize| {
        let x = x.clamp(0.0, (w0 - 1) as f64);
        let y = y.clamp(0.0, (h0 - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w0 - 1), (y0 + 1).min(h0 - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |yy: usize, xx: usize| d[(yy * w0 + xx) * 3 + c];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    Ok(Tensor::from_fn([height, width, 3], |i| {
        let (y, x, c) = (i / (width * 3), (i / 3) % width, i % 3);
        let sy = (y as f64 + 0.5) * h0 as f64 / height as f64 - 0.5;
        let sx = (x as f64 + 0.5) * w0 as f64 / width as f64 - 0.5;
        sample(sy, sx, c)
    }))
}
