//! Front-to-back alpha-compositing splat renderer.
//!
//! Splats are projected with the local affine approximation of the
//! perspective map, `Σ2D = J W Σ Wᵀ Jᵀ + 0.3 I`. A splat contributes
//! `α = σ exp(-½ dᵀ Σ2D⁻¹ d)` at pixel center `p` (pixel `(x, y)` has its
//! center at `(x + 0.5, y + 0.5)`), clamped to `0.999`; contributions below
//! `1/255` are skipped.
//!
//! The tiled rasterizer bins splats with a conservative radius outside of
//! which every skipped contribution is guaranteed, so it evaluates exactly
//! the same terms in the same order as the naive all-splats loop.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{self, activate, rot_unit, COLOR, D, OPACITY, POS, ROT, SCALE};
use crate::nn::Var;
use crate::tensor::Tensor;

pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const COV_REG: f64 = 0.3;
pub const NEAR: f64 = 0.01;
pub const TILE: usize = 16;
/// Columns of a projected splat row: `u v a b c depth`.
pub const PROJ: usize = 6;

/// A projected Gaussian. `cov` is `[a, b, c]` for `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub id: usize,
    pub center: [f64; 2],
    pub cov: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Propagate gradients into position, rotation and scale.
    pub geometric_grads: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3], geometric_grads: true }
    }
}

struct Projection {
    /// `u v a b c depth`
    row: [f64; PROJ],
    // intermediates reused by the backward pass
    p: [f64; 3],
    sigma_cam: [f64; 9],
    j: [f64; 6],
    rot: [f64; 9],
    quat: [f64; 4],
    scale: [f64; 3],
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    c
}

fn mat3_t(a: &[f64; 9]) -> [f64; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

/// Projects one activated attribute row. `None` when behind the near plane.
fn project_row(attr: &[f64], cam: &Camera) -> Option<Projection> {
    let p = cam.to_camera([attr[POS], attr[POS + 1], attr[POS + 2]]);
    if !(p[2] > NEAR) {
        return None;
    }
    let q = [attr[ROT], attr[ROT + 1], attr[ROT + 2], attr[ROT + 3]];
    let rot = rot_unit(q);
    let scale = [attr[SCALE], attr[SCALE + 1], attr[SCALE + 2]];
    let sigma = gaussians::cov_from_rot(&rot, scale);
    let sigma_cam = mat3_mul(&mat3_mul(&cam.r, &sigma), &mat3_t(&cam.r));
    let (x, y, z) = (p[0], p[1], p[2]);
    let j = [cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z)];
    // Σ2D = J Σc Jᵀ
    let mut js = [0.0; 6];
    for r in 0..2 {
        for c in 0..3 {
            js[r * 3 + c] = (0..3).map(|k| j[r * 3 + k] * sigma_cam[k * 3 + c]).sum();
        }
    }
    let e = |r: usize, c: usize| (0..3).map(|k| js[r * 3 + k] * j[c * 3 + k]).sum::<f64>();
    let row = [
        cam.fx * x / z + cam.cx,
        cam.fy * y / z + cam.cy,
        e(0, 0) + COV_REG,
        e(0, 1),
        e(1, 1) + COV_REG,
        z,
    ];
    Some(Projection { row, p, sigma_cam, j, rot, quat: q, scale })
}

/// Splats of all Gaussians in front of the camera, in input order.
pub fn project(attrs: &Tensor, cam: &Camera) -> Result<Vec<Splat2D>> {
    check_attrs(attrs)?;
    Ok(attrs
        .data()
        .chunks(D)
        .enumerate()
        .filter_map(|(id, a)| project_row(a, cam).map(|pr| splat_from(id, &pr.row, a)))
        .collect())
}

fn splat_from(id: usize, row: &[f64], attr: &[f64]) -> Splat2D {
    Splat2D {
        id,
        center: [row[0], row[1]],
        cov: [row[2], row[3], row[4]],
        depth: row[5],
        color: [attr[COLOR], attr[COLOR + 1], attr[COLOR + 2]],
        opacity: attr[OPACITY],
    }
}

fn check_attrs(attrs: &Tensor) -> Result<()> {
    if attrs.rank() != 2 || attrs.shape()[1] != D {
        return Err(Error::Dimension(format!("expected activated [N, {D}] attributes, got {:?}", attrs.shape())));
    }
    Ok(())
}

/// Ascending depth, ties by id.
pub fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
}

#[derive(Clone, Copy, Debug)]
struct Prepared {
    /// index into the caller's splat list
    index: usize,
    u: f64,
    v: f64,
    /// inverse covariance `[A, B, C]` and determinant
    conic: [f64; 3],
    det: f64,
    cov: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    radius: f64,
}

fn prepare(index: usize, s: &Splat2D) -> Option<Prepared> {
    let [a, b, c] = s.cov;
    let det = a * c - b * b;
    if !(det > 0.0 && a > 0.0) || !det.is_finite() || !s.center[0].is_finite() || !s.center[1].is_finite() {
        return None;
    }
    if !(s.opacity >= ALPHA_MIN) {
        return None;
    }
    let lmax = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    // beyond this distance q > 2 ln(255 σ) + 2, so α < e⁻¹/255
    let radius = (2.0 * ((255.0 * s.opacity).ln() + 1.0) * lmax).sqrt() + 1.0;
    Some(Prepared {
        index,
        u: s.center[0],
        v: s.center[1],
        conic: [c / det, -b / det, a / det],
        det,
        cov: s.cov,
        opacity: s.opacity,
        color: s.color,
        radius,
    })
}

/// `(α, q, clamped)` at a pixel center, or `None` when skipped.
#[inline]
fn alpha_at(p: &Prepared, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let (dx, dy) = (px - p.u, py - p.v);
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    let a = p.opacity * (-0.5 * q).exp();
    if !(a >= ALPHA_MIN) {
        return None;
    }
    if a > ALPHA_MAX {
        Some((ALPHA_MAX, q, true))
    } else {
        Some((a, q, false))
    }
}

/// Blending weights `α_i Π_{j<i}(1-α_j)` of depth-sorted splats at point
/// `p`, and the residual transmittance.
pub fn composite_weights(sorted: &[Splat2D], p: [f64; 2]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = vec![0.0; sorted.len()];
    for (i, s) in sorted.iter().enumerate() {
        if let Some(pr) = prepare(i, s) {
            if let Some((a, _, _)) = alpha_at(&pr, p[0], p[1]) {
                w[i] = a * t;
                t *= 1.0 - a;
            }
        }
    }
    (w, t)
}

/// Color at point `p` from depth-sorted splats.
pub fn composite(sorted: &[Splat2D], p: [f64; 2], background: [f64; 3]) -> [f64; 3] {
    let (w, t) = composite_weights(sorted, p);
    let mut c = [0.0; 3];
    for k in 0..3 {
        for (s, wi) in sorted.iter().zip(&w) {
            c[k] += s.color[k] * wi;
        }
        c[k] += background[k] * t;
    }
    c
}

fn shade_pixel(list: &[Prepared], px: f64, py: f64, bg: [f64; 3], out: &mut [f64]) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for pr in list {
        if let Some((a, _, _)) = alpha_at(pr, px, py) {
            for k in 0..3 {
                c[k] += pr.color[k] * a * t;
            }
            t *= 1.0 - a;
        }
    }
    for k in 0..3 {
        out[k] = c[k] + bg[k] * t;
    }
}

/// Depth-sorts and prepares splats; returns the sorted splats too.
fn prepare_all(splats: &[Splat2D]) -> (Vec<Splat2D>, Vec<Prepared>) {
    let mut sorted = splats.to_vec();
    sort_splats(&mut sorted);
    let prepared = sorted.iter().enumerate().filter_map(|(i, s)| prepare(i, s)).collect();
    (sorted, prepared)
}

/// Reference rasterizer: every pixel visits every splat.
pub fn rasterize_naive(splats: &[Splat2D], width: usize, height: usize, background: [f64; 3]) -> Tensor {
    let (_, prepared) = prepare_all(splats);
    let mut img = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let o = (y * width + x) * 3;
            shade_pixel(&prepared, x as f64 + 0.5, y as f64 + 0.5, background, &mut img[o..o + 3]);
        }
    }
    Tensor::new([height, width, 3], img).unwrap()
}

struct Tiles {
    cols: usize,
    rows: usize,
    lists: Vec<Vec<usize>>,
}

fn bin(prepared: &[Prepared], width: usize, height: usize) -> Tiles {
    let (cols, rows) = (width.div_ceil(TILE), height.div_ceil(TILE));
    let mut lists = vec![Vec::new(); cols * rows];
    for (k, p) in prepared.iter().enumerate() {
        // pixel-center extents reachable within the radius
        let x0 = ((p.u - p.radius - 0.5).floor().max(0.0)) as usize;
        let y0 = ((p.v - p.radius - 0.5).floor().max(0.0)) as usize;
        let x1 = (p.u + p.radius - 0.5).ceil();
        let y1 = (p.v + p.radius - 0.5).ceil();
        if x1 < 0.0 || y1 < 0.0 || x0 >= width || y0 >= height {
            continue;
        }
        let x1 = (x1 as usize).min(width - 1);
        let y1 = (y1 as usize).min(height - 1);
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                // nearest pixel center of this tile to the splat center
                let cx = p.u.clamp(tx as f64 * TILE as f64 + 0.5, ((tx + 1) * TILE).min(width) as f64 - 0.5);
                let cy = p.v.clamp(ty as f64 * TILE as f64 + 0.5, ((ty + 1) * TILE).min(height) as f64 - 0.5);
                if (cx - p.u).powi(2) + (cy - p.v).powi(2) <= p.radius * p.radius {
                    lists[ty * cols + tx].push(k);
                }
            }
        }
    }
    Tiles { cols, rows, lists }
}

fn tile_bounds(tiles: &Tiles, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (t % tiles.cols, t / tiles.cols);
    (tx * TILE, ((tx + 1) * TILE).min(width), ty * TILE, ((ty + 1) * TILE).min(height))
}

fn rasterize_prepared(prepared: &[Prepared], width: usize, height: usize, background: [f64; 3]) -> Tensor {
    let tiles = bin(prepared, width, height);
    let blocks: Vec<Vec<f64>> = (0..tiles.cols * tiles.rows)
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = tile_bounds(&tiles, t, width, height);
            let list: Vec<Prepared> = tiles.lists[t].iter().map(|&k| prepared[k]).collect();
            let mut block = vec![0.0; (x1 - x0) * (y1 - y0) * 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let o = ((y - y0) * (x1 - x0) + x - x0) * 3;
                    shade_pixel(&list, x as f64 + 0.5, y as f64 + 0.5, background, &mut block[o..o + 3]);
                }
            }
            block
        })
        .collect();
    let mut img = vec![0.0; width * height * 3];
    for (t, block) in blocks.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(&tiles, t, width, height);
        for y in y0..y1 {
            let src = (y - y0) * (x1 - x0) * 3;
            img[(y * width + x0) * 3..(y * width + x1) * 3].copy_from_slice(&block[src..src + (x1 - x0) * 3]);
        }
    }
    Tensor::new([height, width, 3], img).unwrap()
}

/// Tile-based rasterizer, bit-identical to [`rasterize_naive`].
pub fn rasterize(splats: &[Splat2D], width: usize, height: usize, background: [f64; 3]) -> Tensor {
    let (_, prepared) = prepare_all(splats);
    rasterize_prepared(&prepared, width, height, background)
}

/// Renders one frame of activated attributes `[N, D]` to `[H, W, 3]`.
pub fn render_frame(attrs: &Tensor, cam: &Camera, background: [f64; 3]) -> Result<Tensor> {
    Ok(rasterize(&project(attrs, cam)?, cam.width, cam.height, background))
}

/// [`render_frame`] through the naive rasterizer.
pub fn render_frame_naive(attrs: &Tensor, cam: &Camera, background: [f64; 3]) -> Result<Tensor> {
    Ok(rasterize_naive(&project(attrs, cam)?, cam.width, cam.height, background))
}

/// Selects one camera per frame: either `frames` cameras or one shared.
pub fn cameras_for(cams: &[Camera], frames: usize) -> Result<Vec<&Camera>> {
    match cams.len() {
        1 => Ok(vec![&cams[0]; frames]),
        n if n == frames => Ok(cams.iter().collect()),
        n => Err(Error::Config(format!("{n} cameras for {frames} frames"))),
    }
}

/// Renders every frame of a raw `[T, N, D]` set.
pub fn render_sequence(set: &gaussians::GaussianFrameSet, cams: &[Camera], background: [f64; 3]) -> Result<Vec<Tensor>> {
    let cams = cameras_for(cams, set.frames())?;
    (0..set.frames())
        .map(|t| render_frame(&activate(&set.frame(t)?)?, cams[t], background))
        .collect()
}

/// Differentiable projection of activated attributes `[N, D]` to
/// `[N, 6]` rows `u v a b c depth`. Culled Gaussians get depth `-1`.
pub fn project_var<'g>(attrs: &Var<'g>, cam: &Camera) -> Result<Var<'g>> {
    check_attrs(attrs.value())?;
    let n = attrs.shape()[0];
    let mut out = vec![0.0; n * PROJ];
    for (i, a) in attrs.value().data().chunks(D).enumerate() {
        match project_row(a, cam) {
            Some(pr) => out[i * PROJ..(i + 1) * PROJ].copy_from_slice(&pr.row),
            None => out[i * PROJ + 5] = -1.0,
        }
    }
    let cam = cam.clone();
    Ok(attrs.graph().op(Tensor::new([n, PROJ], out)?, &[attrs], move |p, _, gy| {
        let attrs = p[0].data();
        let mut g = vec![0.0; attrs.len()];
        for i in 0..n {
            let gr = &gy.data()[i * PROJ..(i + 1) * PROJ];
            if gr[..5].iter().all(|&v| v == 0.0) {
                continue;
            }
            let a = &attrs[i * D..(i + 1) * D];
            let Some(pr) = project_row(a, &cam) else { continue };
            project_backward(&pr, &cam, gr, &mut g[i * D..(i + 1) * D]);
        }
        vec![Some(Tensor::new([n, D], g).unwrap())]
    }))
}

fn project_backward(pr: &Projection, cam: &Camera, gr: &[f64], g: &mut [f64]) {
    let [x, y, z] = pr.p;
    let (gu, gv) = (gr[0], gr[1]);
    // gradient of Σ2D as a symmetric matrix
    let gs = [gr[2], 0.5 * gr[3], 0.5 * gr[3], gr[4]];
    let mut gp = [cam.fx / z * gu, cam.fy / z * gv, -cam.fx * x / (z * z) * gu - cam.fy * y / (z * z) * gv];
    let j = &pr.j;
    // dL/dJ = 2 G J Σc
    let mut jsc = [0.0; 6];
    for r in 0..2 {
        for c in 0..3 {
            jsc[r * 3 + c] = (0..3).map(|k| j[r * 3 + k] * pr.sigma_cam[k * 3 + c]).sum();
        }
    }
    let mut gj = [0.0; 6];
    for r in 0..2 {
        for c in 0..3 {
            gj[r * 3 + c] = 2.0 * (0..2).map(|k| gs[r * 2 + k] * jsc[k * 3 + c]).sum::<f64>();
        }
    }
    let (z2, z3) = (z * z, z * z * z);
    gp[2] += gj[0] * (-cam.fx / z2) + gj[2] * (2.0 * cam.fx * x / z3) + gj[4] * (-cam.fy / z2) + gj[5] * (2.0 * cam.fy * y / z3);
    gp[0] += gj[2] * (-cam.fx / z2);
    gp[1] += gj[5] * (-cam.fy / z2);
    // position: p = W x + t
    for k in 0..3 {
        g[POS + k] += (0..3).map(|r| cam.r[r * 3 + k] * gp[r]).sum::<f64>();
    }
    // dL/dΣc = Jᵀ G J
    let mut gsc = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            let mut s = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    s += j[r * 3 + a] * gs[r * 2 + c] * j[c * 3 + b];
                }
            }
            gsc[a * 3 + b] = s;
        }
    }
    // dL/dΣ = Wᵀ (dL/dΣc) W
    let gsig = mat3_mul(&mat3_mul(&mat3_t(&cam.r), &gsc), &cam.r);
    // Σ = M Mᵀ with M = R S: dL/dM = 2 dL/dΣ M
    let mut m = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            m[r * 3 + c] = pr.rot[r * 3 + c] * pr.scale[c];
        }
    }
    let gm = mat3_mul(&gsig, &m).map(|v| 2.0 * v);
    let mut grot = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            grot[r * 3 + c] = gm[r * 3 + c] * pr.scale[c];
            g[SCALE + c] += gm[r * 3 + c] * pr.rot[r * 3 + c];
        }
    }
    let gq = rot_backward(pr.quat, &grot);
    for k in 0..4 {
        g[ROT + k] += gq[k];
    }
}

/// Gradient of `rot_unit(q)` entries w.r.t. `q = (w, x, y, z)`.
fn rot_backward(q: [f64; 4], grot: &[f64; 9]) -> [f64; 4] {
    let [w, x, y, z] = q;
    // d R / d w, x, y, z (row-major)
    let dw = [0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0];
    let dx = [0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x];
    let dy = [-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y];
    let dz = [-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0];
    let dot = |d: &[f64; 9]| (0..9).map(|i| d[i] * grot[i]).sum::<f64>();
    [dot(&dw), dot(&dx), dot(&dy), dot(&dz)]
}


/// Per-splat gradient slots: color (3), opacity, u, v, a, b, c.
const GSLOTS: usize = 9;

/// Differentiable rasterization of projected rows `[N, 6]` with colors and
/// opacities read from activated attributes `[N, D]`.
pub fn rasterize_var<'g>(proj: &Var<'g>, attrs: &Var<'g>, width: usize, height: usize, opts: RenderOptions) -> Result<Var<'g>> {
    check_attrs(attrs.value())?;
    let n = attrs.shape()[0];
    if proj.shape() != [n, PROJ] {
        return Err(Error::Dimension(format!("projection {:?} for {n} Gaussians", proj.shape())));
    }
    let splats = splats_from_rows(proj.value(), attrs.value());
    let (sorted, prepared) = prepare_all(&splats);
    let img = rasterize_prepared(&prepared, width, height, opts.background);
    let ids: Vec<usize> = prepared.iter().map(|p| sorted[p.index].id).collect();
    Ok(proj.graph().op(img, &[proj, attrs], move |_, _, gy| {
        let tiles = bin(&prepared, width, height);
        let partial: Vec<Vec<f64>> = (0..tiles.cols * tiles.rows)
            .into_par_iter()
            .map(|t| tile_backward(&tiles, t, &prepared, width, height, opts, gy.data()))
            .collect();
        let mut acc = vec![0.0; prepared.len() * GSLOTS];
        for (t, part) in partial.iter().enumerate() {
            for (slot, &k) in tiles.lists[t].iter().enumerate() {
                for s in 0..GSLOTS {
                    acc[k * GSLOTS + s] += part[slot * GSLOTS + s];
                }
            }
        }
        let mut g_attr = vec![0.0; n * D];
        let mut g_proj = vec![0.0; n * PROJ];
        for (k, &id) in ids.iter().enumerate() {
            let a = &acc[k * GSLOTS..(k + 1) * GSLOTS];
            g_attr[id * D + COLOR..id * D + COLOR + 3].copy_from_slice(&a[..3]);
            g_attr[id * D + OPACITY] = a[3];
            g_proj[id * PROJ..id * PROJ + 5].copy_from_slice(&a[4..9]);
        }
        vec![
            opts.geometric_grads.then(|| Tensor::new([n, PROJ], g_proj).unwrap()),
            Some(Tensor::new([n, D], g_attr).unwrap()),
        ]
    }))
}

fn splats_from_rows(proj: &Tensor, attrs: &Tensor) -> Vec<Splat2D> {
    proj.data()
        .chunks(PROJ)
        .zip(attrs.data().chunks(D))
        .enumerate()
        .filter(|(_, (row, _))| row[5] > NEAR)
        .map(|(id, (row, a))| splat_from(id, row, a))
        .collect()
}

/// Gradient slots for the splats binned into tile `t`, in list order.
fn tile_backward(tiles: &Tiles, t: usize, prepared: &[Prepared], width: usize, height: usize, opts: RenderOptions, gy: &[f64]) -> Vec<f64> {
    let list = &tiles.lists[t];
    let mut out = vec![0.0; list.len() * GSLOTS];
    let (x0, x1, y0, y1) = tile_bounds(tiles, t, width, height);
    // (slot, α, q, clamped, T before)
    let mut hits: Vec<(usize, f64, f64, bool, f64)> = Vec::with_capacity(list.len());
    for y in y0..y1 {
        for x in x0..x1 {
            let o = (y * width + x) * 3;
            let gp = [gy[o], gy[o + 1], gy[o + 2]];
            if gp == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            hits.clear();
            let mut tr = 1.0;
            for (slot, &k) in list.iter().enumerate() {
                if let Some((a, q, clamped)) = alpha_at(&prepared[k], px, py) {
                    hits.push((slot, a, q, clamped, tr));
                    tr *= 1.0 - a;
                }
            }
            let mut behind = opts.background;
            for &(slot, a, q, clamped, tr) in hits.iter().rev() {
                let p = &prepared[list[slot]];
                let g = &mut out[slot * GSLOTS..(slot + 1) * GSLOTS];
                let mut dalpha = 0.0;
                for c in 0..3 {
                    g[c] += gp[c] * a * tr;
                    dalpha += gp[c] * tr * (p.color[c] - behind[c]);
                    behind[c] = p.color[c] * a + (1.0 - a) * behind[c];
                }
                if clamped {
                    continue;
                }
                g[3] += dalpha * a / p.opacity;
                if opts.geometric_grads {
                    let dq = -0.5 * a * dalpha;
                    let (dx, dy) = (px - p.u, py - p.v);
                    let [ca, cb, cc] = p.conic;
                    let [a2, b2, c2] = p.cov;
                    g[4] -= dq * 2.0 * (ca * dx + cb * dy);
                    g[5] -= dq * 2.0 * (cb * dx + cc * dy);
                    g[6] += dq * (dy * dy - q * c2) / p.det;
                    g[7] += dq * (-2.0 * dx * dy + 2.0 * b2 * q) / p.det;
                    g[8] += dq * (dx * dx - q * a2) / p.det;
                }
            }
        }
    }
    out
}

/// Differentiable render of one frame of activated attributes `[N, D]`.
pub fn render_var<'g>(attrs: &Var<'g>, cam: &Camera, opts: RenderOptions) -> Result<Var<'g>> {
    let proj = project_var(attrs, cam)?;
    rasterize_var(&proj, attrs, cam.width, cam.height, opts)
}
