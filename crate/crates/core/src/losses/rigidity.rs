//! Intra-group rigidity across sampled timestamp pairs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::tensor::Tensor;

/// `K` distinct unordered frame pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestampPairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl TimestampPairSet {
    /// Draws `min(k, T(T−1)/2)` distinct pairs without replacement.
    pub fn sample(frames: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("rigidity needs at least one timestamp pair".into()));
        }
        let all: Vec<(usize, usize)> = (0..frames).flat_map(|a| (a + 1..frames).map(move |b| (a, b))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let take = k.min(all.len());
        let pairs = sample(&mut rng, all.len(), take).into_iter().map(|i| all[i]).collect();
        Ok(Self { pairs })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum References {
    /// One reference per `(pair, group)`.
    Sampled(Vec<Vec<usize>>),
    /// Every Gaussian of the group serves as reference.
    All,
}

impl References {
    pub fn sample(pairs: usize, groups: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4ef5);
        Self::Sampled((0..pairs).map(|_| (0..groups).map(|_| rng.random_range(0..n.max(1))).collect()).collect())
    }
}

fn dist(p: &[f64], i: usize, j: usize) -> (f64, [f64; 3]) {
    let d = [p[i * 3] - p[j * 3], p[i * 3 + 1] - p[j * 3 + 1], p[i * 3 + 2] - p[j * 3 + 2]];
    ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(), d)
}

/// Loss over positions `[T, G, N, 3]`, normalized by `K·G·(N−1)` (times `N`
/// with all references).
pub fn loss_rigidity_var<'g>(positions: &Var<'g>, pairs: &TimestampPairSet, refs: &References) -> Result<Var<'g>> {
    let s = positions.shape().to_vec();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::Dimension(format!("rigidity expects [T, G, N, 3] positions, got {s:?}")));
    }
    let (t, g, n) = (s[0], s[1], s[2]);
    if let Some(&(a, b)) = pairs.pairs.iter().find(|&&(a, b)| a >= t || b >= t || a == b) {
        return Err(Error::Config(format!("invalid timestamp pair ({a}, {b}) for {t} frames")));
    }
    if let References::Sampled(r) = refs {
        if r.len() != pairs.pairs.len() || r.iter().any(|row| row.len() != g || row.iter().any(|&i| i >= n)) {
            return Err(Error::Config("reference table does not match pairs and groups".into()));
        }
    }
    let k = pairs.pairs.len();
    if n < 2 || k == 0 {
        return Ok(positions.graph().constant(Tensor::scalar(0.0)));
    }
    let refs_of = {
        let refs = refs.clone();
        move |kk: usize, gg: usize| -> Vec<usize> {
            match &refs {
                References::Sampled(r) => vec![r[kk][gg]],
                References::All => (0..n).collect(),
            }
        }
    };
    let per_ref = if matches!(refs, References::All) { n } else { 1 };
    let norm = (k * g * (n - 1) * per_ref) as f64;
    let group_stride = n * 3;
    let frame_stride = g * group_stride;
    let pairs = pairs.pairs.clone();
    let x = positions.value().data();
    let mut total = 0.0;
    for (kk, &(t1, t2)) in pairs.iter().enumerate() {
        for gg in 0..g {
            let p1 = &x[t1 * frame_stride + gg * group_stride..][..group_stride];
            let p2 = &x[t2 * frame_stride + gg * group_stride..][..group_stride];
            for i in refs_of(kk, gg) {
                for j in (0..n).filter(|&j| j != i) {
                    let r = dist(p1, i, j).0 - dist(p2, i, j).0;
                    total += r * r;
                }
            }
        }
    }
    Ok(positions.graph().op(Tensor::scalar(total / norm), &[positions], move |parents, _, gy| {
        let x = parents[0].data();
        let mut grad = vec![0.0; x.len()];
        let scale = gy.item() * 2.0 / norm;
        for (kk, &(t1, t2)) in pairs.iter().enumerate() {
            for gg in 0..g {
                let o1 = t1 * frame_stride + gg * group_stride;
                let o2 = t2 * frame_stride + gg * group_stride;
                let p1 = &x[o1..o1 + group_stride];
                let p2 = &x[o2..o2 + group_stride];
                for i in refs_of(kk, gg) {
                    for j in (0..n).filter(|&j| j != i) {
                        let (d1, v1) = dist(p1, i, j);
                        let (d2, v2) = dist(p2, i, j);
                        let r = scale * (d1 - d2);
                        for c in 0..3 {
                            if d1 > 0.0 {
                                let gc = r * v1[c] / d1;
                                grad[o1 + i * 3 + c] += gc;
                                grad[o1 + j * 3 + c] -= gc;
                            }
                            if d2 > 0.0 {
                                let gc = r * v2[c] / d2;
                                grad[o2 + i * 3 + c] -= gc;
                                grad[o2 + j * 3 + c] += gc;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new(parents[0].shape().to_vec(), grad).unwrap())]
    }))
}

pub fn loss_rigidity(positions: &Tensor, pairs: &TimestampPairSet, refs: &References) -> Result<f64> {
    let g = Graph::inference();
    Ok(loss_rigidity_var(&g.constant(positions.clone()), pairs, refs)?.item())
}
