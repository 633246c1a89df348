//! Geometric information enhancement: plane factorization, GroupFormer,
//! fusion with the `N⁺` resize and cross-attention enhancement.

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Bindings, DepthwiseConv, FeedForward, Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParameterStore, Var};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 8;

/// A plane's tokens `[rows * cols, D]` with their grid.
#[derive(Clone)]
pub struct Plane<'g> {
    pub tokens: Var<'g>,
    pub grid: (usize, usize),
}

/// Mean-pooled planes `(P1 over t, P2 over n, P3 over g)` of `[T_A, G, N, D]`,
/// on grids `(G, N)`, `(G, T_A)` and `(N, T_A)`.
pub fn kplanes_decompose<'g>(gp: &Var<'g>) -> Result<[Plane<'g>; 3]> {
    let s = gp.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Layout(format!("plane decomposition expects [T_A, G, N, D], got {s:?}")));
    }
    let (t_a, g, n, d) = (s[0], s[1], s[2], s[3]);
    let p1 = gp.mean_axis(0)?.reshape([g * n, d])?;
    let p2 = gp.mean_axis(2)?.permute(&[1, 0, 2])?.reshape([g * t_a, d])?;
    let p3 = gp.mean_axis(1)?.permute(&[1, 0, 2])?.reshape([n * t_a, d])?;
    Ok([
        Plane { tokens: p1, grid: (g, n) },
        Plane { tokens: p2, grid: (g, t_a) },
        Plane { tokens: p3, grid: (n, t_a) },
    ])
}

/// `x' = GA(LN(x)) + x; out = FFN(LN(x')) + x'` with
/// `GA = Li ∘ LSE ∘ W-MSA ∘ Li ∘ LSE`.
#[derive(Clone, Debug)]
pub struct GroupFormerLayer {
    pub ln1: LayerNorm,
    pub lse_in: DepthwiseConv,
    pub li_in: Linear,
    pub wmsa: MultiHeadAttention,
    pub lse_out: DepthwiseConv,
    pub li_out: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct GroupFormer {
    pub layers: Vec<GroupFormerLayer>,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl GroupFormer {
    /// `window` is clamped to the grid.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        init: &mut Init,
        name: &str,
        grid: (usize, usize),
        dim: usize,
        hidden: usize,
        heads: usize,
        window: (usize, usize),
        depth: usize,
    ) -> Result<Self> {
        let cfg = AttentionConfig::new(hidden, heads)?.with_window(window.0.min(grid.0), window.1.min(grid.1))?;
        let layers = (0..depth)
            .map(|l| {
                let n = format!("{name}.layer{l}");
                Ok(GroupFormerLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), dim)?,
                    lse_in: DepthwiseConv::new(store, init, &format!("{n}.lse_in"), dim)?,
                    li_in: Linear::new(store, init, &format!("{n}.li_in"), dim, hidden)?,
                    wmsa: MultiHeadAttention::new(store, init, &format!("{n}.wmsa"), cfg)?,
                    lse_out: DepthwiseConv::new(store, init, &format!("{n}.lse_out"), hidden)?,
                    li_out: Linear::new(store, init, &format!("{n}.li_out"), hidden, dim)?,
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), dim)?,
                    ffn: FeedForward::new(store, init, &format!("{n}.ffn"), dim, 4 * dim, dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, grid, dim })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        if x.shape() != [self.grid.0 * self.grid.1, self.dim] {
            return Err(Error::Layout(format!(
                "plane tokens {:?} do not match grid {}x{} of width {}",
                x.shape(),
                self.grid.0,
                self.grid.1,
                self.dim
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let a = l.ln1.forward(p, &h)?;
            let a = l.lse_in.forward(p, &a, self.grid)?;
            let a = l.li_in.forward(p, &a)?;
            let a = l.wmsa.windowed(p, &a, self.grid)?;
            let a = l.lse_out.forward(p, &a, self.grid)?;
            let a = l.li_out.forward(p, &a)?;
            h = h.add(&a)?;
            h = h.add(&l.ffn.forward(p, &l.ln2.forward(p, &h)?)?)?;
        }
        Ok(h)
    }
}

/// Row-major concatenation of the planes reshaped to `[rows, N⁺·D]`. With
/// `pad`, zero rows complete the last packed row instead of failing.
pub fn fuse_and_resize<'g>(g: &'g Graph, planes: &[Var<'g>], n_plus: usize, pad: bool) -> Result<Var<'g>> {
    if n_plus == 0 || planes.is_empty() {
        return Err(Error::Config("N⁺ must be positive and at least one plane given".into()));
    }
    let d = planes[0].shape()[1];
    let refs: Vec<&Var<'g>> = planes.iter().collect();
    let mut cat = Var::concat(&refs, 0)?;
    let rows = cat.shape()[0];
    if rows % n_plus != 0 {
        if !pad {
            return Err(Error::Config(format!("{rows} plane tokens are not divisible by N⁺ = {n_plus}")));
        }
        let extra = n_plus - rows % n_plus;
        cat = Var::concat(&[&cat, &g.constant(Tensor::zeros([extra, d]))], 0)?;
    }
    let rows = cat.shape()[0];
    cat.reshape([rows / n_plus, n_plus * d])
}

/// Number of packed rows `fuse_and_resize` produces.
pub fn fused_rows(groups: usize, n: usize, t_a: usize, n_plus: usize, pad: bool) -> Result<usize> {
    let total = groups * n + groups * t_a + n * t_a;
    if n_plus == 0 || (!pad && total % n_plus != 0) {
        return Err(Error::Config(format!("{total} plane tokens are not divisible by N⁺ = {n_plus}")));
    }
    Ok(total.div_ceil(n_plus))
}

#[derive(Clone, Debug)]
pub struct GieConfig {
    pub t_a: usize,
    pub groups: usize,
    pub n: usize,
    pub d: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub hidden_heads: usize,
    pub window: (usize, usize),
    pub depth: usize,
    pub n_plus: usize,
    pub pad: bool,
}

#[derive(Clone, Debug)]
pub struct Gie {
    pub cfg: GieConfig,
    pub proj: [Linear; 3],
    pub formers: [GroupFormer; 3],
    pub kv_in: Linear,
    pub q_in: Linear,
    pub attn: MultiHeadAttention,
    pub out: Linear,
}

pub struct GieOutput<'g> {
    /// `[T_A·G, N·D]`.
    pub tokens: Var<'g>,
    /// `[rows, N⁺·D]`.
    pub fused: Var<'g>,
}

impl Gie {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, cfg: GieConfig) -> Result<Self> {
        fused_rows(cfg.groups, cfg.n, cfg.t_a, cfg.n_plus, cfg.pad)?;
        let grids = [(cfg.groups, cfg.n), (cfg.groups, cfg.t_a), (cfg.n, cfg.t_a)];
        let mk_proj = |i: usize, store: &mut ParameterStore, init: &mut Init| Linear::new(store, init, &format!("{name}.plane{i}.proj"), cfg.d, cfg.d);
        let proj = [mk_proj(0, store, init)?, mk_proj(1, store, init)?, mk_proj(2, store, init)?];
        let mk_gf = |i: usize, store: &mut ParameterStore, init: &mut Init| {
            GroupFormer::new(store, init, &format!("{name}.plane{i}.gf"), grids[i], cfg.d, cfg.hidden, cfg.hidden_heads, cfg.window, cfg.depth)
        };
        let formers = [mk_gf(0, store, init)?, mk_gf(1, store, init)?, mk_gf(2, store, init)?];
        let token_dim = cfg.n * cfg.d;
        Ok(Self {
            kv_in: Linear::new(store, init, &format!("{name}.kv_in"), cfg.n_plus * cfg.d, cfg.model_dim)?,
            q_in: Linear::new(store, init, &format!("{name}.q_in"), token_dim, cfg.model_dim)?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), AttentionConfig::new(cfg.model_dim, cfg.heads)?)?,
            out: Linear::new(store, init, &format!("{name}.out"), cfg.model_dim, token_dim)?,
            proj,
            formers,
            cfg,
        })
    }

    /// Fused plane features of `[T_A·G, N·D]` anchor tokens.
    pub fn fuse<'g>(&self, g: &'g Graph, p: &Bindings<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        let c = &self.cfg;
        if tokens.shape() != [c.t_a * c.groups, c.n * c.d] {
            return Err(Error::Layout(format!(
                "GIE expects [{}, {}] tokens, got {:?}",
                c.t_a * c.groups,
                c.n * c.d,
                tokens.shape()
            )));
        }
        let gp = tokens.reshape([c.t_a, c.groups, c.n, c.d])?;
        let planes = kplanes_decompose(&gp)?;
        let mut feats = Vec::with_capacity(3);
        for ((plane, proj), former) in planes.iter().zip(&self.proj).zip(&self.formers) {
            let x = proj.forward(p, &plane.tokens)?;
            feats.push(former.forward(p, &x)?);
        }
        fuse_and_resize(g, &feats, c.n_plus, c.pad)
    }

    /// `𝒢^SP = 𝒢^P + C-ATT(𝒢^P, 𝒢^SP_f, 𝒢^SP_f)` on flattened tokens.
    pub fn enhance<'g>(&self, p: &Bindings<'g>, tokens: &Var<'g>, fused: &Var<'g>) -> Result<Var<'g>> {
        let q = self.q_in.forward(p, tokens)?;
        let kv = self.kv_in.forward(p, fused)?;
        let ctx = self.attn.cross(p, &q, &kv)?;
        tokens.add(&self.out.forward(p, &ctx)?)
    }

    pub fn forward<'g>(&self, g: &'g Graph, p: &Bindings<'g>, tokens: &Var<'g>) -> Result<GieOutput<'g>> {
        let fused = self.fuse(g, p, tokens)?;
        let tokens = self.enhance(p, tokens, &fused)?;
        Ok(GieOutput { tokens, fused })
    }
}
