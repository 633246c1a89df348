//! Deterministic DDIM over Gaussian tokens: schedule, reverse step, denoiser
//! and the conditional sampling loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Bindings, FeedForward, Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParameterStore, Var};
use crate::prompt::PromptConditioner;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// `betas[t - 1]` is `β_t` for `t = 1..=M`.
    pub betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=M`, with `alpha_bars[0] = 1`.
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `(c_x0, c_xt)` with `x_{t-1} = c_x0 x̂₀ + c_xt x_t`.
    pub fn step_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps())));
        }
        ddim_coefficients(self.alpha_bars[t], self.alpha_bars[t - 1])
    }
}

/// Linear `β` ramp over `m` steps.
pub fn make_schedule(m: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if m == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < β_start ≤ β_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = (0..m)
        .map(|i| if m == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (m - 1) as f64 })
        .collect();
    let mut alpha_bars = Vec::with_capacity(m + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * (1.0 - b));
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

pub fn ddim_coefficients(ab_t: f64, ab_prev: f64) -> Result<(f64, f64)> {
    if ab_t >= 1.0 {
        return Err(Error::DivisionGuard(format!("ᾱ_t = {ab_t} leaves no noise to remove")));
    }
    let c_xt = (1.0 - ab_prev).sqrt() / (1.0 - ab_t).sqrt();
    Ok((ab_prev.sqrt() - c_xt * ab_t.sqrt(), c_xt))
}

/// Reverse step evaluated in the direct form
/// `√ᾱ_{t−1} x̂₀ + √(1−ᾱ_{t−1}) (x_t − √ᾱ_t x̂₀) / √(1−ᾱ_t)`.
pub fn ddim_step_scalar(ab_t: f64, ab_prev: f64, x_t: f64, x0: f64) -> Result<f64> {
    if ab_t >= 1.0 {
        return Err(Error::DivisionGuard(format!("ᾱ_t = {ab_t} leaves no noise to remove")));
    }
    Ok(ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * (x_t - ab_t.sqrt() * x0) / (1.0 - ab_t).sqrt())
}

pub fn ddim_step(x_t: &Tensor, x0: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Config(format!("step {t} outside 1..={}", sched.steps())));
    }
    x_t.expect_same_shape(x0)?;
    let (ab_t, ab_prev) = (sched.alpha_bars[t], sched.alpha_bars[t - 1]);
    let out: Result<Vec<f64>> = x_t
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&xt, &x0)| ddim_step_scalar(ab_t, ab_prev, xt, x0))
        .collect();
    Tensor::new(x_t.shape(), out?)
}

pub fn ddim_step_var<'g>(x_t: &Var<'g>, x0: &Var<'g>, t: usize, sched: &DiffusionSchedule) -> Result<Var<'g>> {
    let (c0, ct) = sched.step_coefficients(t)?;
    x0.scale(c0).add(&x_t.scale(ct))
}

/// Sinusoidal embedding of a step index.
pub fn step_embedding(m: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = (m as f64 * freq).sin();
        out[2 * i + 1] = (m as f64 * freq).cos();
    }
    out
}

/// `[T_A, G, N, D]` to `[T_A·G, N·D]`.
pub fn to_tokens(grouped: &Tensor) -> Result<Tensor> {
    let s = grouped.shape();
    if s.len() != 4 {
        return Err(Error::Layout(format!("expected [T, G, N, D], got {s:?}")));
    }
    grouped.clone().reshape([s[0] * s[1], s[2] * s[3]])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, frames: usize, groups: usize, n: usize, d: usize) -> Result<Tensor> {
    if tokens.shape() != [frames * groups, n * d] {
        return Err(Error::Layout(format!(
            "tokens {:?} do not unflatten to [{frames}, {groups}, {n}, {d}]",
            tokens.shape()
        )));
    }
    tokens.clone().reshape([frames, groups, n, d])
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, cfg: AttentionConfig, ffn_ratio: usize) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d, ffn_ratio * d, d)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = x.add(&self.attn.self_attention(p, &self.ln1.forward(p, x)?)?)?;
        h.add(&self.ffn.forward(p, &self.ln2.forward(p, &h)?)?)
    }
}

/// Transformer over `[T_A·G, N·D]` tokens predicting `x̂₀`.
///
/// With `skip` set (the default) the prediction is `x_t` plus the network
/// output, so an untrained denoiser returns its input.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
    pub unembed: Linear,
    pub model_dim: usize,
    pub skip: bool,
}

impl Denoiser {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, token_dim: usize, cfg: AttentionConfig, depth: usize) -> Result<Self> {
        let d = cfg.model_dim;
        let blocks = (0..depth)
            .map(|l| TransformerBlock::new(store, init, &format!("{name}.block{l}"), cfg, 4))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: Linear::new(store, init, &format!("{name}.embed"), token_dim, d)?,
            blocks,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d)?,
            unembed: Linear::new(store, init, &format!("{name}.unembed"), d, token_dim)?,
            model_dim: d,
            skip: true,
        })
    }

    /// `x̂₀` from `x_t` at step `m`, conditioned through `prompt` on `e_tilde`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bindings<'g>,
        x_t: &Var<'g>,
        m: usize,
        prompt: &PromptConditioner,
        e_tilde: &Var<'g>,
    ) -> Result<Var<'g>> {
        let step = g.constant(Tensor::new([self.model_dim], step_embedding(m, self.model_dim))?);
        let mut h = self.embed.forward(p, x_t)?.add_row(&step)?;
        h = prompt.inject(p, &h, e_tilde)?;
        for b in &self.blocks {
            h = b.forward(p, &h)?;
        }
        let y = self.unembed.forward(p, &self.ln_out.forward(p, &h)?)?;
        if self.skip {
            x_t.add(&y)
        } else {
            Ok(y)
        }
    }
}

/// Runs `t = M..1`: prompt injection, `x̂₀` prediction and the DDIM step.
pub fn sample<'g>(
    g: &'g Graph,
    p: &Bindings<'g>,
    x_noise: &Var<'g>,
    e_tilde: &Var<'g>,
    prompt: &PromptConditioner,
    denoiser: &Denoiser,
    sched: &DiffusionSchedule,
) -> Result<Var<'g>> {
    let mut x = x_noise.clone();
    for t in (1..=sched.steps()).rev() {
        let x0 = denoiser.forward(g, p, &x, t, prompt, e_tilde)?;
        x = ddim_step_var(&x, &x0, t, sched)?;
    }
    Ok(x)
}
