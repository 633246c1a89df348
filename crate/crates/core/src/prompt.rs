//! Text encoders, the time-varying prompt expansion and prompt injection.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttentionLayout, Bindings, Graph, Init, Mlp, MultiHeadAttention, ParameterStore, Var};
use crate::tensor::Tensor;

pub const FOURIER_DIM: usize = 8;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"STP4DEMB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Toy,
    File,
    Service,
}

/// Unit-norm text feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

impl PromptEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &PromptEmbedding) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// File name stem under which the file backend stores a caption's embedding.
pub fn embedding_key(text: &str) -> String {
    format!("{:016x}", fnv1a(text.trim().as_bytes()))
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Encoder(format!("embedding has norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderBackend {
    /// Hash of whitespace tokens and adjacent token pairs.
    #[default]
    Toy,
    /// `<embedding_dir>/<key>.json` or `<key>.emb`, see [`embedding_key`].
    File,
    /// POST `{"text": ...}` to `service_url`, expects a JSON float array.
    Service,
}

/// The `prompt` section of a pipeline config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub backend: EncoderBackend,
    pub seed: u64,
    pub embedding_dir: Option<PathBuf>,
    pub service_url: Option<String>,
    pub timeout_ms: u64,
    pub frame_restricted: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { backend: EncoderBackend::Toy, seed: 0, embedding_dir: None, service_url: None, timeout_ms: 10_000, frame_restricted: true }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: PromptConfig,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(config: PromptConfig, dim: usize) -> Self {
        Self { config, dim }
    }

    pub fn encode(&self, text: &str) -> Result<PromptEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::Encoder("empty prompt".into()));
        }
        let c = &self.config;
        let values = match c.backend {
            EncoderBackend::Toy => toy_text_embedding(text, self.dim, c.seed),
            EncoderBackend::File => {
                let dir = c.embedding_dir.as_ref().ok_or_else(|| Error::Encoder("file backend needs prompt.embedding_dir".into()))?;
                from_file(dir, text)?
            }
            EncoderBackend::Service => {
                let url = c.service_url.as_ref().ok_or_else(|| Error::Encoder("service backend needs prompt.service_url".into()))?;
                fetch_embedding(url, text, c.timeout_ms)?
            }
        };
        if values.len() != self.dim {
            return Err(Error::Encoder(format!("embedding has dimension {}, expected {}", values.len(), self.dim)));
        }
        let source = match c.backend {
            EncoderBackend::Toy => EmbeddingSource::Toy,
            EncoderBackend::File => EmbeddingSource::File,
            EncoderBackend::Service => EmbeddingSource::Service,
        };
        Ok(PromptEmbedding { values: normalize(values)?, source })
    }
}

fn from_file(dir: &Path, text: &str) -> Result<Vec<f64>> {
    let key = embedding_key(text);
    for ext in ["json", "emb"] {
        let p = dir.join(format!("{key}.{ext}"));
        if p.exists() {
            return read_embedding(&p);
        }
    }
    Err(Error::Encoder(format!("no embedding for `{}` under {} (key {key})", text.trim(), dir.display())))
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic pseudo-random unit vector of a caption.
pub fn toy_text_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    let mut v = vec![0.0; dim];
    for t in &tokens {
        for (a, b) in v.iter_mut().zip(token_vector(t, dim, seed)) {
            *a += b;
        }
    }
    for w in tokens.windows(2) {
        for (a, b) in v.iter_mut().zip(token_vector(&format!("{}\u{1f}{}", w[0], w[1]), dim, seed)) {
            *a += 0.5 * b;
        }
    }
    v
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingJson {
    dim: usize,
    values: Vec<f64>,
}

/// Reads a JSON `{"dim", "values"}` or binary `STP4DEMB` embedding file.
pub fn read_embedding(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Encoder(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        let dim = bytes
            .get(8..12)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::Encoder("truncated embedding header".into()))?;
        let payload = &bytes[12..];
        if payload.len() != dim * 4 {
            return Err(Error::Encoder(format!("embedding payload holds {} bytes, expected {}", payload.len(), dim * 4)));
        }
        return Ok(payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect());
    }
    let e: EmbeddingJson = serde_json::from_slice(&bytes).map_err(|e| Error::Encoder(format!("{}: {e}", path.display())))?;
    if e.values.len() != e.dim {
        return Err(Error::Encoder(format!("declared dim {} but {} values", e.dim, e.values.len())));
    }
    Ok(e.values)
}

pub fn write_embedding_json(path: &Path, values: &[f64]) -> Result<()> {
    std::fs::write(path, serde_json::to_string(&EmbeddingJson { dim: values.len(), values: values.to_vec() })?)?;
    Ok(())
}

pub fn write_embedding_binary(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = EMBEDDING_MAGIC.to_vec();
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn fetch_embedding(url: &str, text: &str, timeout_ms: u64) -> Result<Vec<f64>> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .build()
        .into();
    let body = serde_json::json!({ "text": text });
    let mut resp = agent
        .post(url)
        .send_json(&body)
        .map_err(|e| Error::Encoder(format!("service {url}: {e}")))?;
    let mut raw = String::new();
    resp.body_mut()
        .as_reader()
        .read_to_string(&mut raw)
        .map_err(|e| Error::Encoder(format!("service {url}: {e}")))?;
    serde_json::from_str::<Vec<f64>>(&raw).map_err(|e| Error::Encoder(format!("service {url} returned non-array: {e}")))
}

/// 8-dimensional sinusoidal encoding of `tau` (`t / T_A`).
pub fn fourier_time(tau: f64) -> [f64; FOURIER_DIM] {
    let mut out = [0.0; FOURIER_DIM];
    for k in 0..FOURIER_DIM / 2 {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out[2 * k] = (w * tau).sin();
        out[2 * k + 1] = (w * tau).cos();
    }
    out
}

/// `ẽ_t = MLP([e, fourier(t / T_A)])` followed by cross-attention injection
/// of `ẽ` into Gaussian tokens.
#[derive(Clone, Debug)]
pub struct PromptConditioner {
    pub mlp: Mlp,
    pub attn: MultiHeadAttention,
    /// Each frame's tokens attend only to that frame's prompt row.
    pub frame_restricted: bool,
}

impl PromptConditioner {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, cfg: AttentionConfig, frame_restricted: bool) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), &[d + FOURIER_DIM, d, d])?,
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg)?,
            frame_restricted,
        })
    }

    /// `[T_A, D']` time-varying prompt.
    pub fn time_varying<'g>(&self, g: &'g Graph, p: &Bindings<'g>, e: &[f64], t_a: usize) -> Result<Var<'g>> {
        if t_a == 0 {
            return Err(Error::Config("T_A must be at least 1".into()));
        }
        let d = e.len();
        let mut input = Vec::with_capacity(t_a * (d + FOURIER_DIM));
        for t in 0..t_a {
            input.extend_from_slice(e);
            input.extend_from_slice(&fourier_time(t as f64 / t_a as f64));
        }
        let x = g.constant(Tensor::new([t_a, d + FOURIER_DIM], input)?);
        self.mlp.forward(p, &x)
    }

    /// `tokens + C-ATT(tokens, ẽ, ẽ)`; `tokens` are `[T_A * G, D']`, frame-major.
    pub fn inject<'g>(&self, p: &Bindings<'g>, tokens: &Var<'g>, e_tilde: &Var<'g>) -> Result<Var<'g>> {
        let t_a = e_tilde.shape()[0];
        let rows = tokens.shape()[0];
        if t_a == 0 || rows % t_a != 0 || tokens.shape().get(1) != e_tilde.shape().get(1) {
            return Err(Error::Dimension(format!(
                "prompt injection: tokens {:?} are not frame-major over prompt {:?}",
                tokens.shape(),
                e_tilde.shape()
            )));
        }
        let layout = if self.frame_restricted {
            AttentionLayout::batched(t_a, rows / t_a, 1)
        } else {
            AttentionLayout::dense(rows, t_a)
        };
        let ctx = self.attn.forward(p, tokens, e_tilde, e_tilde, &layout)?;
        tokens.add(&ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_is_bounded() {
        for t in 0..10 {
            assert!(fourier_time(t as f64 / 10.0).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        let enc = TextEncoder::new(PromptConfig::default(), 8);
        assert!(matches!(enc.encode("  "), Err(Error::Encoder(_))));
    }
}
