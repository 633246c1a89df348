//! Temporal extension: learnable pool queries over anchor-frame tokens.
//!
//! Token `(t, g)` of the pool attends to the anchor tokens `(t_a, g)` of the
//! same group across all anchor frames. With `interpolate` set (the default)
//! the attention output is added to a linear interpolation of the anchors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttentionLayout, Bindings, Init, Linear, MultiHeadAttention, ParameterStore, Var};
use crate::tensor::Tensor;

pub const POOL_NOISE_STD: f64 = 0.02;

/// `η = T / T_A` kept as the two integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtensionRatio {
    pub frames: usize,
    pub anchors: usize,
}

impl ExtensionRatio {
    pub fn new(frames: usize, anchors: usize) -> Result<Self> {
        if anchors == 0 || frames < anchors {
            return Err(Error::Config(format!("cannot extend {anchors} anchor frames to {frames} frames")));
        }
        Ok(Self { frames, anchors })
    }

    pub fn eta(&self) -> f64 {
        self.frames as f64 / self.anchors as f64
    }
}

/// Pool value of frame `t`: its fractional anchor index `t·T_A/T` scaled to
/// `[0, 1)`, broadcast over the group layout, plus small seeded noise.
pub fn init_pool(ratio: ExtensionRatio, groups: usize, n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, POOL_NOISE_STD).expect("valid std");
    let per_frame = groups * n * d;
    Tensor::from_fn([ratio.frames, groups, n, d], |i| {
        let t = i / per_frame;
        let tau = t as f64 * ratio.anchors as f64 / ratio.frames as f64;
        tau / ratio.anchors as f64 + noise.sample(&mut rng)
    })
}

#[derive(Clone, Debug)]
pub struct Ted {
    pub ratio: ExtensionRatio,
    pub groups: usize,
    pub n: usize,
    pub d: usize,
    pub pool: String,
    pub q_in: Linear,
    pub kv_in: Linear,
    pub attn: MultiHeadAttention,
    pub out: Linear,
    pub interpolate: bool,
}

/// `[T, T_A]` weights of the linear interpolation of anchor frames at
/// `τ = t·(T_A − 1)/(T − 1)`.
pub fn interpolation_weights(ratio: ExtensionRatio) -> Tensor {
    let (t, t_a) = (ratio.frames, ratio.anchors);
    let mut w = vec![0.0; t * t_a];
    for f in 0..t {
        let tau = if t > 1 { (f * (t_a - 1)) as f64 / (t - 1) as f64 } else { 0.0 };
        let lo = (tau.floor() as usize).min(t_a - 1);
        let hi = (lo + 1).min(t_a - 1);
        let frac = tau - lo as f64;
        w[f * t_a + lo] += 1.0 - frac;
        w[f * t_a + hi] += frac;
    }
    Tensor::new([t, t_a], w).expect("sized above")
}

impl Ted {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        init: &mut Init,
        name: &str,
        ratio: ExtensionRatio,
        groups: usize,
        n: usize,
        d: usize,
        cfg: AttentionConfig,
        pool_seed: u64,
    ) -> Result<Self> {
        let pool = format!("{name}.pool");
        store.insert(&pool, init_pool(ratio, groups, n, d, pool_seed))?;
        let token = n * d;
        Ok(Self {
            ratio,
            groups,
            n,
            d,
            pool,
            q_in: Linear::new(store, init, &format!("{name}.q_in"), token, cfg.model_dim)?,
            kv_in: Linear::new(store, init, &format!("{name}.kv_in"), token, cfg.model_dim)?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg)?,
            out: Linear::new(store, init, &format!("{name}.out"), cfg.model_dim, token)?,
            interpolate: true,
        })
    }

    /// `[T_A·G, N·D]` frame-major anchors to `𝒢^STP` `[T, G, N, D]`.
    pub fn extend<'g>(&self, p: &Bindings<'g>, anchors: &Var<'g>) -> Result<Var<'g>> {
        let (t_a, t, g, token) = (self.ratio.anchors, self.ratio.frames, self.groups, self.n * self.d);
        if anchors.shape() != [t_a * g, token] {
            return Err(Error::Layout(format!("TED expects [{}, {token}] anchors, got {:?}", t_a * g, anchors.shape())));
        }
        let pool = p.get(&self.pool)?;
        if pool.shape() != [t, g, self.n, self.d] {
            return Err(Error::Config(format!("weight pool {:?} does not hold {t} frames", pool.shape())));
        }
        let group_major = |x: &Var<'g>, frames: usize| -> Result<Var<'g>> {
            x.reshape([frames, g, token])?.permute(&[1, 0, 2])?.reshape([g * frames, token])
        };
        let keys = self.kv_in.forward(p, &group_major(anchors, t_a)?)?;
        let queries = self.q_in.forward(p, &group_major(pool, t)?)?;
        let layout = AttentionLayout::batched(g, t, t_a);
        let ctx = self.attn.forward(p, &queries, &keys, &keys, &layout)?;
        let y = self.out.forward(p, &ctx)?.reshape([g, t, token])?.permute(&[1, 0, 2])?;
        let y = if self.interpolate {
            let w = anchors.graph().constant(interpolation_weights(self.ratio));
            let base = w.matmul(&anchors.reshape([t_a, g * token])?)?;
            y.reshape([t, g * token])?.add(&base)?
        } else {
            y
        };
        y.reshape([t, g, self.n, self.d])
    }
}
