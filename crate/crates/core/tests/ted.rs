mod common;

use common::*;
use proptest::prelude::*;
use stp4d::nn::{AttentionConfig, Graph, Init, ParameterStore};
use stp4d::ted::*;
use stp4d::{Error, Tensor};

const D: usize = 14;

fn ted(frames: usize, anchors: usize, groups: usize, n: usize, seed: u64) -> (ParameterStore, Ted) {
    let mut store = ParameterStore::new();
    let ratio = ExtensionRatio::new(frames, anchors).unwrap();
    let t = Ted::new(&mut store, &mut Init::new(seed), "ted", ratio, groups, n, D, AttentionConfig::new(8, 2).unwrap(), seed ^ 0xabc).unwrap();
    (store, t)
}

fn extend(store: &ParameterStore, t: &Ted, anchors: &Tensor) -> Tensor {
    let g = Graph::inference();
    let p = store.bind(&g);
    t.extend(&p, &g.constant(anchors.clone())).unwrap().value().clone()
}

#[test]
fn paper_ratio_gives_twenty_four_frames() {
    let (store, t) = ted(24, 12, 2, 1, 0);
    assert_eq!(t.ratio.eta(), 2.0);
    let out = extend(&store, &t, &rand_tensor(&[12 * 2, D], 1, 1.0));
    assert_eq!(out.shape(), &[24, 2, 1, D]);
}

#[test]
fn ablation_ratios_have_the_right_frame_counts() {
    for (frames, anchors) in [(16, 4), (12, 4), (8, 4), (4, 3)] {
        let (store, t) = ted(frames, anchors, 2, 2, 1);
        let out = extend(&store, &t, &rand_tensor(&[anchors * 2, 2 * D], 2, 1.0));
        assert_eq!(out.shape(), &[frames, 2, 2, D]);
        assert_eq!(t.ratio.eta(), frames as f64 / anchors as f64);
    }
}

#[test]
fn shrinking_or_empty_ratios_are_config_errors() {
    assert!(matches!(ExtensionRatio::new(2, 4), Err(Error::Config(_))));
    assert!(matches!(ExtensionRatio::new(4, 0), Err(Error::Config(_))));
}

#[test]
fn anchor_layout_is_checked() {
    let (store, t) = ted(4, 2, 2, 1, 0);
    let g = Graph::inference();
    let p = store.bind(&g);
    assert!(matches!(t.extend(&p, &g.constant(Tensor::zeros([3, D]))), Err(Error::Layout(_))));
}

#[test]
fn single_anchor_gives_identical_frames() {
    for interpolate in [true, false] {
        let (mut store, mut t) = ted(4, 1, 2, 2, 3);
        t.interpolate = interpolate;
        randomize(&mut store, 4, 0.5);
        let out = extend(&store, &t, &rand_tensor(&[2, 2 * D], 5, 1.0));
        let per = 2 * 2 * D;
        for f in 1..4 {
            assert!(max_diff(&out.data()[f * per..(f + 1) * per], &out.data()[..per]) < 1e-12);
        }
    }
}

#[test]
fn interpolation_weights_by_hand() {
    let w = interpolation_weights(ExtensionRatio::new(4, 2).unwrap());
    let want = [1.0, 0.0, 2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 0.0, 1.0];
    assert!(max_diff(w.data(), &want) < 1e-15);
    assert_eq!(interpolation_weights(ExtensionRatio::new(3, 3).unwrap()), Tensor::eye(3));
    let w = interpolation_weights(ExtensionRatio::new(4, 3).unwrap());
    let want = [1.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 1.0];
    assert!(max_diff(w.data(), &want) < 1e-15);
}

/// Group-major attention of pool queries over the same group's anchors, plus
/// the interpolated anchors.
fn extend_oracle(store: &ParameterStore, t: &Ted, anchors: &Tensor) -> Vec<f64> {
    let (frames, t_a, g) = (t.ratio.frames, t.ratio.anchors, t.groups);
    let token = t.n * t.d;
    let pool = store.get(&t.pool).unwrap().data();
    let w = interpolation_weights(t.ratio);
    let mut out = vec![0.0; frames * g * token];
    for gi in 0..g {
        let q: Vec<f64> = (0..frames).flat_map(|f| pool[(f * g + gi) * token..(f * g + gi + 1) * token].to_vec()).collect();
        let a: Vec<f64> = (0..t_a).flat_map(|f| anchors.data()[(f * g + gi) * token..(f * g + gi + 1) * token].to_vec()).collect();
        let qe = lin(store, &t.q_in, &q);
        let ke = lin(store, &t.kv_in, &a);
        let ctx = mha(store, &t.attn, &qe, &ke, 8, 2, |_, _| true);
        let y = lin(store, &t.out, &ctx);
        for f in 0..frames {
            for k in 0..token {
                let base: f64 = (0..t_a).map(|s| w.data()[f * t_a + s] * a[s * token + k]).sum();
                out[(f * g + gi) * token + k] = y[f * token + k] + if t.interpolate { base } else { 0.0 };
            }
        }
    }
    out
}

#[test]
fn two_anchors_to_four_frames_match_hand_attention() {
    for interpolate in [true, false] {
        let (mut store, mut t) = ted(4, 2, 2, 1, 6);
        t.interpolate = interpolate;
        randomize(&mut store, 7, 0.4);
        let anchors = rand_tensor(&[4, D], 8, 1.0);
        let got = extend(&store, &t, &anchors);
        assert!(max_diff(got.data(), &extend_oracle(&store, &t, &anchors)) < 1e-12);
    }
}

#[test]
fn pool_starts_near_interpolated_time() {
    let ratio = ExtensionRatio::new(8, 4).unwrap();
    let a = init_pool(ratio, 3, 2, D, 1);
    assert_eq!(a, init_pool(ratio, 3, 2, D, 1));
    assert_eq!(a.shape(), &[8, 3, 2, D]);
    let per = 3 * 2 * D;
    for f in 0..8 {
        let mean = a.data()[f * per..(f + 1) * per].iter().sum::<f64>() / per as f64;
        assert!((mean - f as f64 / 8.0).abs() < 4.0 * POOL_NOISE_STD / (per as f64).sqrt() + 1e-12);
    }
}

#[test]
fn ted_gradients_match_finite_differences() {
    let (mut store, t) = ted(4, 2, 1, 2, 9);
    randomize(&mut store, 10, 0.5);
    sharpen_attention(&mut store, 3.0);
    let anchors = rand_tensor(&[2, 2 * D], 11, 1.0);
    let w = rand_tensor(&[4, 1, 2, D], 12, 1.0);
    check(
        &store,
        |g, p| {
            let a = g.leaf(anchors.clone());
            Ok(t.extend(p, &a)?.mul(&g.constant(w.clone()))?.sum())
        },
        1e-3,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frames_ignore_other_pool_rows(seed in 0u64..10_000, t_a in 1usize..4, extra in 0usize..4, zeroed in 0usize..8) {
        let frames = t_a + extra;
        let zeroed = zeroed % frames;
        let (mut store, t) = ted(frames, t_a, 2, 1, seed);
        randomize(&mut store, seed, 0.5);
        let anchors = rand_tensor(&[t_a * 2, D], seed + 1, 1.0);
        let before = extend(&store, &t, &anchors);
        let mut pool = store.get(&t.pool).unwrap().clone();
        let per = 2 * D;
        pool.data_mut()[zeroed * per..(zeroed + 1) * per].fill(0.0);
        store.set(&t.pool, pool).unwrap();
        let after = extend(&store, &t, &anchors);
        for f in 0..frames {
            let same = before.data()[f * per..(f + 1) * per] == after.data()[f * per..(f + 1) * per];
            prop_assert!(same || f == zeroed);
        }
    }

    #[test]
    fn groups_do_not_mix(seed in 0u64..10_000) {
        let (mut store, t) = ted(4, 2, 2, 1, seed);
        randomize(&mut store, seed, 0.5);
        let anchors = rand_tensor(&[4, D], seed + 1, 1.0);
        let mut moved = anchors.clone();
        // Perturb group 1 in every anchor frame.
        for f in 0..2 {
            for k in 0..D {
                moved.data_mut()[(f * 2 + 1) * D + k] += 0.5;
            }
        }
        let a = extend(&store, &t, &anchors);
        let b = extend(&store, &t, &moved);
        for f in 0..4 {
            prop_assert_eq!(&a.data()[f * 2 * D..f * 2 * D + D], &b.data()[f * 2 * D..f * 2 * D + D]);
        }
    }

    #[test]
    fn interpolation_rows_are_convex(t_a in 1usize..6, extra in 0usize..10) {
        let w = interpolation_weights(ExtensionRatio::new(t_a + extra, t_a).unwrap());
        for row in w.data().chunks(t_a) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
