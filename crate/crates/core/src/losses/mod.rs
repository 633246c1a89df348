//! The five consistency losses and their weighted fusion.

pub mod clip;
pub mod frechet;
pub mod fvd;
pub mod rigidity;
pub mod smooth;
pub mod ssim;

use serde::{Deserialize, Serialize};

pub use clip::{loss_clip, loss_clip_var, ImageEncoder, ToyImageEncoder};
pub use frechet::{frechet_distance, frechet_distance_var};
pub use fvd::{loss_fvd, loss_fvd_var, ToyI3d, VideoFeatures};
pub use rigidity::{loss_rigidity, loss_rigidity_var, References, TimestampPairSet};
pub use smooth::{loss_smooth, loss_smooth_var, sg_coefficients};
pub use ssim::{loss_ssim, loss_ssim_var};

use crate::error::{Error, Result};
use crate::nn::Var;

pub const NAMES: [&str; 5] = ["l_ssim", "l_rig", "l_fvd", "l_smooth", "l_clip"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([1.0, 0.01, 0.001, 0.1, 1.0])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {:?}", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ssim: f64,
    pub l_rig: f64,
    pub l_fvd: f64,
    pub l_smooth: f64,
    pub l_clip: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 5] {
        [self.l_ssim, self.l_rig, self.l_fvd, self.l_smooth, self.l_clip]
    }
}

fn check_finite(components: &[f64; 5]) -> Result<()> {
    match components.iter().position(|c| !c.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{} = {}", NAMES[i], components[i]))),
        None => Ok(()),
    }
}

/// `total = Σ θ_i l_i`.
pub fn fuse(components: [f64; 5], weights: &LossWeights) -> Result<LossReport> {
    check_finite(&components)?;
    let total = components.iter().zip(weights.0).map(|(c, w)| w * c).sum();
    let [l_ssim, l_rig, l_fvd, l_smooth, l_clip] = components;
    Ok(LossReport { l_ssim, l_rig, l_fvd, l_smooth, l_clip, total })
}

/// Fuses differentiable components; the report's total equals the returned
/// scalar's value.
pub fn fuse_var<'g>(components: [&Var<'g>; 5], weights: &LossWeights) -> Result<(Var<'g>, LossReport)> {
    let values = components.map(|c| c.item());
    let report = fuse(values, weights)?;
    let mut total = components[0].scale(weights.0[0]);
    for (c, w) in components.iter().zip(weights.0).skip(1) {
        total = total.add(&c.scale(w))?;
    }
    let report = LossReport { total: total.item(), ..report };
    Ok((total, report))
}
