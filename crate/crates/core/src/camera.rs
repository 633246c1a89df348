//! Pinhole cameras and the JSON camera file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World-to-camera pinhole camera. `r` is row-major; camera looks down +z,
/// image y grows downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.r[i * 3 + k] * self.r[j * 3 + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with world +y as up.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], fov_y_deg: f64, width: usize, height: usize) -> Self {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let norm = |a: [f64; 3]| {
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            [a[0] / n, a[1] / n, a[2] / n]
        };
        let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let fwd = norm(sub(target, eye));
        let right = norm(cross(fwd, [0.0, 1.0, 0.0]));
        let down = cross(fwd, right);
        let r = [right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2]];
        let t = [
            -(r[0] * eye[0] + r[1] * eye[1] + r[2] * eye[2]),
            -(r[3] * eye[0] + r[4] * eye[1] + r[5] * eye[2]),
            -(r[6] * eye[0] + r[7] * eye[1] + r[8] * eye[2]),
        ];
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64, r, t, width, height }
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.t[2],
        ]
    }
}

/// `count` cameras on a horizontal circle of `radius` around the origin,
/// raised by `elevation_deg`, all looking at the origin.
pub fn orbit(count: usize, radius: f64, elevation_deg: f64, fov_y_deg: f64, width: usize, height: usize) -> Vec<Camera> {
    let el = elevation_deg.to_radians();
    (0..count)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / count.max(1) as f64;
            let eye = [radius * el.cos() * az.sin(), radius * el.sin(), -radius * el.cos() * az.cos()];
            Camera::look_at(eye, [0.0; 3], fov_y_deg, width, height)
        })
        .collect()
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let cams: Vec<Camera> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_cameras(path: impl AsRef<Path>, cams: &[Camera]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cams)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_target() {
        let c = Camera::look_at([1.0, 2.0, -4.0], [0.0; 3], 50.0, 64, 48);
        c.validate().unwrap();
        let p = c.to_camera([0.0; 3]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        // world up maps to image up (negative camera y)
        let up = c.to_camera([0.0, 1.0, 0.0]);
        assert!(up[1] < p[1]);
    }
}
