//! Per-frame Gaussian attribute tensors, grouping and activation.
//!
//! Channel layout of the last axis (`D = 14`):
//! `x y z | qw qx qy qz | sx sy sz | r g b | opacity`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::nn::{sigmoid, Var};
use crate::tensor::Tensor;

pub const D: usize = 14;
pub const POS: usize = 0;
pub const ROT: usize = 3;
pub const SCALE: usize = 7;
pub const COLOR: usize = 10;
pub const OPACITY: usize = 13;

/// `[frames, N_total, D]` raw attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFrameSet {
    pub values: Tensor,
}

impl GaussianFrameSet {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[2] != D {
            return dim_err(format!("frame set must be [T, N, {D}], got {:?}", values.shape()));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.values.shape()[1]
    }

    /// Attributes of frame `t` as `[N, D]`.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        self.values.slice0(t, 1)?.reshape([self.count(), D])
    }
}

/// I.i.d. standard normal `[t_a, n_total, d]`, deterministic per seed.
pub fn init_noise(t_a: usize, n_total: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([t_a, n_total, d], |_| StandardNormal.sample(&mut rng))
}

/// Grouped layout `[T, G, N, D]` plus the assignment of every Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedGaussians {
    pub values: Tensor,
    pub grouping: Grouping,
}

/// Equal-size partition of `G * N` Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub groups: usize,
    pub size: usize,
    /// `order[g * N + slot]` is the Gaussian id at `(g, slot)`.
    pub order: Vec<usize>,
}

impl Grouping {
    /// `(g, slot)` of every Gaussian id.
    pub fn group_index(&self) -> Vec<(usize, usize)> {
        let mut idx = vec![(0, 0); self.order.len()];
        for (k, &id) in self.order.iter().enumerate() {
            idx[id] = (k / self.size, k % self.size);
        }
        idx
    }

    /// Reorders `[T, N_total, D]` into `[T, G, N, D]`.
    pub fn apply(&self, frames: &Tensor) -> Result<Tensor> {
        let (t, n, d) = check_frames(frames)?;
        if n != self.order.len() {
            return dim_err(format!("grouping covers {} Gaussians, frames hold {n}", self.order.len()));
        }
        let src = frames.data();
        let mut out = Vec::with_capacity(src.len());
        for f in 0..t {
            for &id in &self.order {
                let s = (f * n + id) * d;
                out.extend_from_slice(&src[s..s + d]);
            }
        }
        Tensor::new([t, self.groups, self.size, d], out)
    }

    /// Inverse of [`Grouping::apply`].
    pub fn unapply(&self, grouped: &Tensor) -> Result<Tensor> {
        let s = grouped.shape();
        if s.len() != 4 || s[1] != self.groups || s[2] != self.size {
            return dim_err(format!("grouped tensor {s:?} does not match {}x{}", self.groups, self.size));
        }
        let (t, n, d) = (s[0], self.order.len(), s[3]);
        let mut out = vec![0.0; t * n * d];
        for f in 0..t {
            for (k, &id) in self.order.iter().enumerate() {
                let src = (f * n + k) * d;
                out[(f * n + id) * d..(f * n + id + 1) * d].copy_from_slice(&grouped.data()[src..src + d]);
            }
        }
        Tensor::new([t, n, d], out)
    }

    /// Row gather index mapping flat `[T * N_total, D]` rows to grouped order.
    pub fn row_index(&self, frames: usize) -> Arc<Vec<Option<usize>>> {
        let n = self.order.len();
        Arc::new((0..frames).flat_map(|f| self.order.iter().map(move |&id| Some(f * n + id))).collect())
    }
}

fn check_frames(frames: &Tensor) -> Result<(usize, usize, usize)> {
    if frames.rank() != 3 || frames.shape()[2] < 3 {
        return dim_err(format!("expected [T, N, D>=3], got {:?}", frames.shape()));
    }
    Ok((frames.shape()[0], frames.shape()[1], frames.shape()[2]))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Greedy farthest-seed equal-size clustering of frame-0 positions.
///
/// The first seed is the point farthest from the centroid; each later seed
/// is the unassigned point farthest from all chosen seeds. A seed takes its
/// `N - 1` nearest unassigned neighbours. Ties go to the lower id. Small
/// sets are then refined by member swaps (see [`REFINE_MAX_POINTS`]).
pub fn group_positions(points: &[[f64; 3]], groups: usize) -> Result<Grouping> {
    let total = points.len();
    if groups == 0 || total == 0 || total % groups != 0 {
        return Err(Error::Config(format!("{total} Gaussians cannot form {groups} equal groups")));
    }
    let size = total / groups;
    let mut assigned = vec![false; total];
    let mut seed_dist = vec![f64::INFINITY; total];
    let mut order = Vec::with_capacity(total);
    let centroid = {
        let mut c = [0.0; 3];
        for p in points {
            for i in 0..3 {
                c[i] += p[i] / total as f64;
            }
        }
        c
    };
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(total);
    for g in 0..groups {
        let seed = if g == 0 {
            argmax((0..total).map(|i| dist2(&points[i], &centroid)))
        } else {
            argmax((0..total).map(|i| if assigned[i] { f64::NEG_INFINITY } else { seed_dist[i] }))
        };
        cand.clear();
        cand.extend((0..total).filter(|&i| !assigned[i] && i != seed).map(|i| (dist2(&points[i], &points[seed]), i)));
        let take = size - 1;
        if take > 0 && take < cand.len() {
            cand.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(take);
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.push(seed);
        assigned[seed] = true;
        for &(_, i) in cand.iter().take(take) {
            order.push(i);
            assigned[i] = true;
        }
        for i in 0..total {
            seed_dist[i] = seed_dist[i].min(dist2(&points[i], &points[seed]));
        }
    }
    if total <= REFINE_MAX_POINTS && groups > 1 && size > 1 {
        refine_swaps(points, size, &mut order);
    }
    Ok(Grouping { groups, size, order })
}

/// Point sets up to this size get the pairwise-swap refinement in
/// [`group_positions`]; larger sets keep the greedy assignment.
pub const REFINE_MAX_POINTS: usize = 4096;

/// Swaps members between groups while any swap lowers the summed intra-group
/// Euclidean distance. At a swap-stable partition the mean intra-group
/// distance cannot exceed the mean cross-group distance.
fn refine_swaps(points: &[[f64; 3]], size: usize, order: &mut [usize]) {
    let total = order.len();
    let groups = total / size;
    let d = |a: usize, b: usize| dist2(&points[a], &points[b]).sqrt();
    // to_group[x * groups + k]: summed distance from point x to group k.
    let mut to_group = vec![0.0; total * groups];
    let mut scale = 0.0;
    for (k, members) in order.chunks(size).enumerate() {
        for x in 0..total {
            let s: f64 = members.iter().map(|&m| d(x, m)).sum();
            to_group[x * groups + k] = s;
            scale += s;
        }
    }
    let tol = 1e-12 * scale / (total * total) as f64;
    loop {
        let mut improved = false;
        for ga in 0..groups {
            for gb in ga + 1..groups {
                for sa in 0..size {
                    for sb in 0..size {
                        let (a, b) = (order[ga * size + sa], order[gb * size + sb]);
                        let dab = d(a, b);
                        let delta = to_group[b * groups + ga] + to_group[a * groups + gb] - 2.0 * dab
                            - to_group[a * groups + ga]
                            - to_group[b * groups + gb];
                        if delta < -tol {
                            order.swap(ga * size + sa, gb * size + sb);
                            for x in 0..total {
                                let (dxa, dxb) = (d(x, a), d(x, b));
                                to_group[x * groups + ga] += dxb - dxa;
                                to_group[x * groups + gb] += dxa - dxb;
                            }
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            return;
        }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Groups `[T, N_total, D]` by frame-0 positions; all frames share the grouping.
pub fn group_knn(frames: &Tensor, groups: usize) -> Result<GroupedGaussians> {
    let (_, n, d) = check_frames(frames)?;
    let points: Vec<[f64; 3]> = (0..n).map(|i| {
        let p = &frames.data()[i * d..i * d + 3];
        [p[0], p[1], p[2]]
    }).collect();
    let grouping = group_positions(&points, groups)?;
    Ok(GroupedGaussians { values: grouping.apply(frames)?, grouping })
}

/// Rotation matrix (row-major) of a quaternion `(w, x, y, z)`, normalized first.
pub fn quat_to_rot(q: [f64; 4]) -> Result<[f64; 9]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Normalization(format!("quaternion {q:?} cannot be normalized")));
    }
    Ok(rot_unit([q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
}

pub(crate) fn rot_unit(q: [f64; 4]) -> [f64; 9] {
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// `Σ = R S Sᵀ Rᵀ` for a quaternion and positive extents `s`.
pub fn covariance(q: [f64; 4], s: [f64; 3]) -> Result<[f64; 9]> {
    let r = quat_to_rot(q)?;
    Ok(cov_from_rot(&r, s))
}

pub(crate) fn cov_from_rot(r: &[f64; 9], s: [f64; 3]) -> [f64; 9] {
    let mut m = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            m[i * 3 + j] = r[i * 3 + j] * s[j];
        }
    }
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| m[i * 3 + k] * m[j * 3 + k]).sum();
        }
    }
    c
}

fn activate_row(raw: &[f64], out: &mut [f64]) -> Result<()> {
    out[POS..POS + 3].copy_from_slice(&raw[POS..POS + 3]);
    let qn = raw[ROT..ROT + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::Normalization("zero quaternion".into()));
    }
    for k in 0..4 {
        out[ROT + k] = raw[ROT + k] / qn;
    }
    for k in 0..3 {
        out[SCALE + k] = raw[SCALE + k].exp();
        out[COLOR + k] = sigmoid(raw[COLOR + k]);
    }
    out[OPACITY] = sigmoid(raw[OPACITY]);
    Ok(())
}

/// Activated attributes: opacity and color through a sigmoid, scale through
/// `exp`, quaternion L2-normalized, position unchanged.
pub fn activate(raw: &Tensor) -> Result<Tensor> {
    if raw.last_dim() != D {
        return dim_err(format!("activate expects last axis {D}, got {:?}", raw.shape()));
    }
    let mut out = vec![0.0; raw.numel()];
    for (r, o) in raw.data().chunks(D).zip(out.chunks_mut(D)) {
        activate_row(r, o)?;
    }
    Tensor::new(raw.shape().to_vec(), out)
}

/// Differentiable [`activate`].
pub fn activate_var<'g>(raw: &Var<'g>) -> Result<Var<'g>> {
    let value = activate(raw.value())?;
    Ok(raw.graph().op(value, &[raw], |p, y, gy| {
        let (x, y, gy) = (p[0].data(), y.data(), gy.data());
        let mut g = vec![0.0; x.len()];
        for ((xr, yr), (gyr, gr)) in x.chunks(D).zip(y.chunks(D)).zip(gy.chunks(D).zip(g.chunks_mut(D))) {
            gr[POS..POS + 3].copy_from_slice(&gyr[POS..POS + 3]);
            let qn = xr[ROT..ROT + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = (0..4).map(|k| yr[ROT + k] * gyr[ROT + k]).sum();
            for k in 0..4 {
                gr[ROT + k] = (gyr[ROT + k] - yr[ROT + k] * dot) / qn;
            }
            for k in 0..3 {
                gr[SCALE + k] = gyr[SCALE + k] * yr[SCALE + k];
                let c = yr[COLOR + k];
                gr[COLOR + k] = gyr[COLOR + k] * c * (1.0 - c);
            }
            let o = yr[OPACITY];
            gr[OPACITY] = gyr[OPACITY] * o * (1.0 - o);
        }
        vec![Some(Tensor::new(p[0].shape().to_vec(), g).unwrap())]
    }))
}

/// Inverse of the activation for a single attribute row (used to build raw
/// ground truth from physical values).
pub fn deactivate_row(pos: [f64; 3], quat: [f64; 4], scale: [f64; 3], color: [f64; 3], opacity: f64) -> [f64; D] {
    let logit = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    };
    let mut r = [0.0; D];
    r[POS..POS + 3].copy_from_slice(&pos);
    r[ROT..ROT + 4].copy_from_slice(&quat);
    for k in 0..3 {
        r[SCALE + k] = scale[k].ln();
        r[COLOR + k] = logit(color[k]);
    }
    r[OPACITY] = logit(opacity);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_examples() {
        let mut raw = [0.0; D];
        raw[ROT] = 2.0;
        let a = activate(&Tensor::new([1, D], raw.to_vec()).unwrap()).unwrap();
        assert_eq!(a.data()[OPACITY], 0.5);
        assert_eq!(a.data()[SCALE], 1.0);
        assert_eq!(&a.data()[ROT..ROT + 4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(covariance([0.0; 4], [1.0; 3]), Err(Error::Normalization(_))));
    }
}
