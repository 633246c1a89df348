//! Parameterised building blocks. Each layer owns only parameter names; the
//! values live in a [`ParameterStore`] and are read through [`Bindings`].

use std::sync::Arc;

use super::attention::AttentionLayout;
use super::graph::Var;
use super::params::{Bindings, Init, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Width, head count and optional 2-D window of an attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub window: Option<(usize, usize)>,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, head_count: usize) -> Result<Self> {
        let cfg = Self { model_dim, head_count, window: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window(mut self, rows: usize, cols: usize) -> Result<Self> {
        self.window = Some((rows, cols));
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || self.model_dim == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "head count {} must be positive and divide model width {}",
                self.head_count, self.model_dim
            )));
        }
        if let Some((r, c)) = self.window {
            if r == 0 || c == 0 {
                return Err(Error::Config("window extents must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, init.uniform([in_dim, out_dim], in_dim))?;
        store.insert(&bias, Tensor::zeros([out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        x.linear(p.get(&self.weight)?, Some(p.get(&self.bias)?))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, Tensor::ones([dim]))?;
        store.insert(&beta, Tensor::zeros([dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(p.get(&self.gamma)?, p.get(&self.beta)?, LAYER_NORM_EPS)
    }
}

/// Two-layer GELU MLP `dim -> hidden -> out`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, &h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, init, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, init, &format!("{name}.v"), d, d)?,
            out: Linear::new(store, init, &format!("{name}.out"), d, d)?,
            cfg,
        })
    }

    /// `softmax((Q W_q)(K W_k)^T / sqrt(d/h)) (V W_v)` per head, concatenated
    /// and passed through the output projection.
    pub fn forward<'g>(
        &self,
        p: &Bindings<'g>,
        queries: &Var<'g>,
        keys: &Var<'g>,
        values: &Var<'g>,
        layout: &AttentionLayout,
    ) -> Result<Var<'g>> {
        let q = self.q.forward(p, queries)?;
        let k = self.k.forward(p, keys)?;
        let v = self.v.forward(p, values)?;
        let o = q.attention(&k, &v, self.cfg.head_count, layout)?;
        self.out.forward(p, &o)
    }

    /// Dense cross-attention `[q, d] x [k, d] -> [q, d]`.
    pub fn cross<'g>(&self, p: &Bindings<'g>, queries: &Var<'g>, context: &Var<'g>) -> Result<Var<'g>> {
        if context.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyKeys);
        }
        let layout = AttentionLayout::dense(queries.shape()[0], context.shape()[0]);
        self.forward(p, queries, context, context, &layout)
    }

    pub fn self_attention<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        self.cross(p, x, x)
    }

    /// Window-restricted self-attention over tokens laid out row-major on a
    /// `rows x cols` grid (`x` is `[rows * cols, d]`). The grid is
    /// zero-padded up to a multiple of the window and padded tokens are
    /// masked out of every softmax.
    pub fn windowed<'g>(&self, p: &Bindings<'g>, x: &Var<'g>, grid: (usize, usize)) -> Result<Var<'g>> {
        let window = self
            .cfg
            .window
            .ok_or_else(|| Error::Config("windowed attention without a window".into()))?;
        if x.shape() != [grid.0 * grid.1, self.cfg.model_dim] {
            return Err(Error::Layout(format!(
                "tokens {:?} do not match grid {}x{} of width {}",
                x.shape(),
                grid.0,
                grid.1,
                self.cfg.model_dim
            )));
        }
        let part = WindowPartition::new(grid, window)?;
        let windows = x.gather_rows(part.gather.clone())?;
        let layout = AttentionLayout {
            batches: part.count,
            q_len: part.size,
            k_len: part.size,
            key_valid: Some(part.valid.clone()),
        };
        let y = self.forward(p, &windows, &windows, &windows, &layout)?;
        y.gather_rows(part.scatter.clone())
    }
}

/// Token reordering that groups a padded grid into contiguous windows.
#[derive(Clone, Debug)]
pub struct WindowPartition {
    pub count: usize,
    pub size: usize,
    /// For each windowed slot, the source grid token (None = padding).
    pub gather: Arc<Vec<Option<usize>>>,
    pub valid: Arc<Vec<bool>>,
    /// For each grid token, its windowed slot.
    pub scatter: Arc<Vec<Option<usize>>>,
}

impl WindowPartition {
    pub fn new(grid: (usize, usize), window: (usize, usize)) -> Result<Self> {
        let (rows, cols) = grid;
        let (wr, wc) = window;
        if wr == 0 || wc == 0 {
            return Err(Error::Config("window extents must be positive".into()));
        }
        if wr > rows || wc > cols {
            return Err(Error::Config(format!("window {wr}x{wc} larger than grid {rows}x{cols}")));
        }
        let (nr, nc) = (rows.div_ceil(wr), cols.div_ceil(wc));
        let size = wr * wc;
        let count = nr * nc;
        let mut gather = Vec::with_capacity(count * size);
        let mut scatter = vec![None; rows * cols];
        for bi in 0..nr {
            for bj in 0..nc {
                for i in 0..wr {
                    for j in 0..wc {
                        let (r, c) = (bi * wr + i, bj * wc + j);
                        if r < rows && c < cols {
                            scatter[r * cols + c] = Some(gather.len());
                            gather.push(Some(r * cols + c));
                        } else {
                            gather.push(None);
                        }
                    }
                }
            }
        }
        let valid = gather.iter().map(Option::is_some).collect();
        Ok(Self { count, size, gather: Arc::new(gather), valid: Arc::new(valid), scatter: Arc::new(scatter) })
    }
}

/// Per-channel 3x3 convolution on a token grid.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: String,
    pub bias: String,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let kernel = format!("{name}.kernel");
        let bias = format!("{name}.bias");
        store.insert(&kernel, init.uniform([3, 3, channels], 9))?;
        store.insert(&bias, Tensor::zeros([channels]))?;
        Ok(Self { kernel, bias, channels })
    }

    /// `x` is `[rows * cols, channels]` in row-major grid order.
    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>, grid: (usize, usize)) -> Result<Var<'g>> {
        let y = x
            .reshape([grid.0, grid.1, self.channels])?
            .depthwise_conv3x3(p.get(&self.kernel)?, p.get(&self.bias)?)?;
        y.reshape([grid.0 * grid.1, self.channels])
    }
}

/// Plain MLP with GELU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'g>(&self, p: &Bindings<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
            }
        }
        Ok(h)
    }
}
