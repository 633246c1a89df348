use nalgebra::Matrix3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stp4d::gaussians::*;
use stp4d::ply::{read_ply, write_ply, PlyFormat};
use stp4d::{Error, Tensor};

fn points_tensor(points: &[[f64; 3]]) -> Tensor {
    let mut data = Vec::new();
    for p in points {
        let mut row = [0.0; D];
        row[..3].copy_from_slice(p);
        row[ROT] = 1.0;
        data.extend_from_slice(&row);
    }
    Tensor::new([1, points.len(), D], data).unwrap()
}

fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn noise_is_deterministic_per_seed() {
    let a = init_noise(2, 50, D, 7);
    let b = init_noise(2, 50, D, 7);
    let c = init_noise(2, 50, D, 8);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), &[2, 50, D]);
}

#[test]
fn noise_moments_follow_the_standard_normal() {
    let t = init_noise(1, 10_000, 10, 3);
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 0.02, "mean {mean}");
    assert!((var - 1.0).abs() <= 0.05, "variance {var}");
}

#[test]
fn noise_at_paper_scale() {
    let t = init_noise(12, 40_000, D, 0);
    assert_eq!(t.shape(), &[12, 40_000, 14]);
    let set = GaussianFrameSet::new(t).unwrap();
    assert_eq!((set.frames(), set.count()), (12, 40_000));
    assert_eq!(set.frame(11).unwrap().shape(), &[40_000, D]);
}

#[test]
fn one_gaussian_per_group_gives_singletons() {
    let pts = random_points(7, 1);
    let g = group_knn(&points_tensor(&pts), 7).unwrap();
    assert_eq!(g.values.shape(), &[1, 7, 1, D]);
    let mut ids = g.grouping.order.clone();
    ids.sort();
    assert_eq!(ids, (0..7).collect::<Vec<_>>());
}

/// Minimum total intra-group distance over every split of 6 points into two triples.
fn brute_force_split(pts: &[[f64; 3]]) -> Vec<usize> {
    let spread = |ids: &[usize]| -> f64 {
        let mut s = 0.0;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                s += dist(&pts[ids[i]], &pts[ids[j]]);
            }
        }
        s
    };
    let mut best = (f64::INFINITY, vec![]);
    for a in 1..6 {
        for b in a + 1..6 {
            let first = vec![0, a, b];
            let second: Vec<usize> = (0..6).filter(|i| !first.contains(i)).collect();
            let cost = spread(&first) + spread(&second);
            if cost < best.0 {
                best = (cost, first);
            }
        }
    }
    best.1
}

#[test]
fn collinear_points_split_into_the_two_clusters() {
    let pts: Vec<[f64; 3]> = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
    let oracle = brute_force_split(&pts);
    assert_eq!(oracle, vec![0, 1, 2]);
    let g = group_knn(&points_tensor(&pts), 2).unwrap().grouping;
    let mut groups: Vec<Vec<usize>> = g.order.chunks(3).map(|c| {
        let mut v = c.to_vec();
        v.sort();
        v
    }).collect();
    groups.sort();
    assert_eq!(groups, vec![vec![0, 1, 2], vec![3, 4, 5]]);
}

#[test]
fn paper_grouping_has_one_hundred_per_group() {
    let noise = init_noise(1, 40_000, D, 0);
    let g = group_knn(&noise, 400).unwrap();
    assert_eq!(g.values.shape(), &[1, 400, 100, D]);
    assert_eq!(g.grouping.size, 100);
}

#[test]
fn indivisible_count_is_a_config_error() {
    let noise = init_noise(1, 10, D, 0);
    assert!(matches!(group_knn(&noise, 3), Err(Error::Config(_))));
}

#[test]
fn grouping_round_trips_through_unapply() {
    let noise = init_noise(3, 12, D, 5);
    let g = group_knn(&noise, 4).unwrap();
    assert_eq!(g.grouping.unapply(&g.values).unwrap(), noise);
    for (id, (grp, slot)) in g.grouping.group_index().into_iter().enumerate() {
        assert_eq!(g.grouping.order[grp * 3 + slot], id);
    }
}

#[test]
fn covariance_examples() {
    let id = covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
    assert_eq!(id, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let d = covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
    assert_eq!(d, [4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert!(matches!(covariance([0.0; 4], [1.0; 3]), Err(Error::Normalization(_))));
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if q.iter().map(|v| v * v).sum::<f64>() > 0.01 {
            return q;
        }
    }
}

#[test]
fn covariance_eigenvalues_are_squared_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let q = random_quat(&mut rng);
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..3.0));
        let c = covariance(q, s).unwrap();
        let m = Matrix3::from_row_slice(&c);
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
        eig.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{eig:?} vs {want:?}");
        }
    }
}

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
fn activation_rejects_a_zero_quaternion() {
    let raw = Tensor::zeros([1, D]);
    assert!(matches!(activate(&raw), Err(Error::Normalization(_))));
}

#[test]
fn deactivate_inverts_activate() {
    let row = deactivate_row([0.1, -0.2, 0.3], [1.0, 0.0, 0.0, 0.0], [0.2, 0.3, 0.4], [0.1, 0.5, 0.9], 0.7);
    let a = activate(&Tensor::new([1, D], row.to_vec()).unwrap()).unwrap();
    let want = [0.1, -0.2, 0.3, 1.0, 0.0, 0.0, 0.0, 0.2, 0.3, 0.4, 0.1, 0.5, 0.9, 0.7];
    for (x, y) in a.data().iter().zip(want) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ply_round_trip_in_both_formats() {
    let raw = init_noise(1, 20, D, 9).reshape([20, D]).unwrap();
    let attrs = activate(&raw).unwrap();
    for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let mut buf = Vec::new();
        write_ply(&mut buf, &attrs, format).unwrap();
        let back = read_ply(buf.as_slice(), std::path::Path::new("mem.ply")).unwrap();
        assert_eq!(back.shape(), attrs.shape());
        for (i, (a, b)) in attrs.data().iter().zip(back.data()).enumerate() {
            let tol = if (COLOR..COLOR + 3).contains(&(i % D)) { 0.5 / 255.0 + 1e-9 } else { 1e-6 * a.abs().max(1.0) };
            assert!((a - b).abs() <= tol, "{format:?} channel {}: {a} vs {b}", i % D);
        }
    }
}

#[test]
fn malformed_ply_is_a_parse_error() {
    let r = read_ply(&b"ply\nformat ascii 1.0\nelement vertex 1\nend_header\n"[..], std::path::Path::new("bad.ply"));
    assert!(matches!(r, Err(Error::Parse { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grouping_is_a_deterministic_partition(seed in 0u64..10_000, groups in 1usize..6, size in 1usize..6) {
        let pts = random_points(groups * size, seed);
        let a = group_knn(&points_tensor(&pts), groups).unwrap().grouping;
        let b = group_knn(&points_tensor(&pts), groups).unwrap().grouping;
        prop_assert_eq!(&a, &b);
        let mut ids = a.order.clone();
        ids.sort();
        prop_assert_eq!(ids, (0..groups * size).collect::<Vec<_>>());
        prop_assert_eq!(a.order.len(), groups * a.size);
    }

    #[test]
    fn groups_are_spatially_close(seed in 0u64..10_000, groups in 2usize..6, size in 2usize..6) {
        let pts = random_points(groups * size, seed);
        let g = group_knn(&points_tensor(&pts), groups).unwrap().grouping;
        let mean_pairs = |ids: &mut dyn Iterator<Item = (usize, usize)>| {
            let (mut s, mut c) = (0.0, 0usize);
            for (i, j) in ids {
                s += dist(&pts[i], &pts[j]);
                c += 1;
            }
            s / c as f64
        };
        let n = pts.len();
        let all = mean_pairs(&mut (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))));
        let intra = mean_pairs(&mut g.order.chunks(size).flat_map(|c| {
            (0..size).flat_map(move |i| (i + 1..size).map(move |j| (c[i], c[j])))
        }));
        prop_assert!(intra <= all, "intra {} > all {}", intra, all);
    }

    #[test]
    fn covariance_is_symmetric_with_squared_volume(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_quat(&mut rng);
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..3.0));
        let c = covariance(q, s).unwrap();
        let m = Matrix3::from_row_slice(&c);
        prop_assert!((m - m.transpose()).abs().max() < 1e-12);
        let want = (s[0] * s[1] * s[2]).powi(2);
        prop_assert!((m.determinant() - want).abs() < 1e-9 * want.max(1.0));
        prop_assert!(m.symmetric_eigen().eigenvalues.iter().all(|&e| e >= -1e-12));
    }

    #[test]
    fn activated_attributes_satisfy_invariants(seed in 0u64..10_000, scale in 0.1f64..5.0) {
        let mut raw = init_noise(1, 16, D, seed);
        raw.data_mut().iter_mut().for_each(|v| *v *= scale);
        let a = activate(&raw).unwrap();
        for row in a.data().chunks(D) {
            let qn = row[ROT..ROT + 4].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((qn - 1.0).abs() <= 1e-6);
            prop_assert!(row[OPACITY] > 0.0 && row[OPACITY] < 1.0);
            prop_assert!(row[SCALE..SCALE + 3].iter().all(|&s| s > 0.0));
            prop_assert!(row[COLOR..COLOR + 3].iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }
}
