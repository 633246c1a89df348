use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stp4d::camera::Camera;
use stp4d::gaussians::*;
use stp4d::nn::*;
use stp4d::renderer::*;
use stp4d::Tensor;

fn random_scene(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for _ in 0..n {
        let pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let s = [rng.random_range(0.05..0.4), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)];
        let c = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        data.extend_from_slice(&deactivate_row(pos, q, s, c, rng.random_range(0.1..0.95)));
    }
    Tensor::new([n, D], data).unwrap()
}

fn cam(w: usize, h: usize) -> Camera {
    Camera::look_at([0.3, 0.5, -4.0], [0.0; 3], 45.0, w, h)
}

#[test]
fn tiled_matches_naive_bitwise() {
    for seed in 0..5 {
        let attrs = activate(&random_scene(50, seed)).unwrap();
        let c = cam(64, 48);
        let a = render_frame(&attrs, &c, [0.1, 0.2, 0.3]).unwrap();
        let b = render_frame_naive(&attrs, &c, [0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn transparent_scene_renders_background() {
    let mut raw = random_scene(10, 3);
    for row in raw.data_mut().chunks_mut(D) {
        row[OPACITY] = f64::NEG_INFINITY;
    }
    let img = render_frame(&activate(&raw).unwrap(), &cam(16, 16), [0.5, 0.25, 1.0]).unwrap();
    for px in img.data().chunks(3) {
        assert_eq!(px, &[0.5, 0.25, 1.0]);
    }
}

#[test]
fn render_is_deterministic() {
    let attrs = activate(&random_scene(30, 4)).unwrap();
    assert_eq!(render_frame(&attrs, &cam(32, 32), [0.0; 3]).unwrap(), render_frame(&attrs, &cam(32, 32), [0.0; 3]).unwrap());
}

#[test]
fn projection_on_axis() {
    let c = Camera { fx: 100.0, fy: 80.0, cx: 32.0, cy: 24.0, r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], t: [0.0; 3], width: 64, height: 48 };
    let z = 5.0;
    let attrs = activate(&Tensor::new([1, D], deactivate_row([0.0, 0.0, z], [1.0, 0.0, 0.0, 0.0], [1.0; 3], [0.5; 3], 0.5).to_vec()).unwrap()).unwrap();
    let s = project(&attrs, &c).unwrap()[0];
    assert!((s.center[0] - 32.0).abs() < 1e-12 && (s.center[1] - 24.0).abs() < 1e-12);
    assert!((s.cov[0] - ((100.0 / z) * (100.0 / z) + 0.3)).abs() < 1e-9);
    assert!((s.cov[2] - ((80.0 / z) * (80.0 / z) + 0.3)).abs() < 1e-9);
    assert!(s.cov[1].abs() < 1e-12);
}

#[test]
fn projection_translation_invariance_and_culling() {
    let attrs = activate(&random_scene(5, 8)).unwrap();
    let c = cam(32, 32);
    let shift = [0.7, -1.2, 2.5];
    let mut moved = attrs.clone();
    for row in moved.data_mut().chunks_mut(D) {
        for k in 0..3 {
            row[k] += shift[k];
        }
    }
    let mut c2 = c.clone();
    for i in 0..3 {
        c2.t[i] -= (0..3).map(|k| c.r[i * 3 + k] * shift[k]).sum::<f64>();
    }
    let a = project(&attrs, &c).unwrap();
    let b = project(&moved, &c2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.center[0] - y.center[0]).abs() < 1e-9 && (x.cov[0] - y.cov[0]).abs() < 1e-9 && (x.depth - y.depth).abs() < 1e-12);
    }
    let behind = activate(&Tensor::new([1, D], deactivate_row([0.0, 0.0, -10.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], [0.5; 3], 0.5).to_vec()).unwrap()).unwrap();
    assert!(project(&behind, &c).unwrap().is_empty());
}

fn splat(id: usize, center: [f64; 2], depth: f64, color: [f64; 3], opacity: f64) -> Splat2D {
    Splat2D { id, center, cov: [4.0, 0.5, 3.0], depth, color, opacity }
}

#[test]
fn composite_examples() {
    assert_eq!(composite(&[], [0.5, 0.5], [0.3, 0.2, 0.1]), [0.3, 0.2, 0.1]);
    let s = splat(0, [2.5, 2.5], 1.0, [1.0, 0.5, 0.0], 0.7);
    let c = composite(&[s], [2.5, 2.5], [0.0, 0.0, 1.0]);
    let expect = [0.7, 0.35, 0.3];
    for k in 0..3 {
        assert!((c[k] - expect[k]).abs() < 1e-15);
    }
}

fn alpha_oracle(s: &Splat2D, p: [f64; 2]) -> f64 {
    let [a, b, c] = s.cov;
    let det = a * c - b * b;
    let (dx, dy) = (p[0] - s.center[0], p[1] - s.center[1]);
    let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    let al = (s.opacity * (-0.5 * q).exp()).min(0.999);
    if al < 1.0 / 255.0 { 0.0 } else { al }
}

#[test]
fn two_splat_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let mut s: Vec<Splat2D> = (0..2)
            .map(|k| {
                let mut sp = splat(k, [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)], rng.random_range(1.0..5.0), [rng.random(), rng.random(), rng.random()], rng.random_range(0.05..1.0));
                sp.cov = [rng.random_range(1.0..6.0), rng.random_range(-0.5..0.5), rng.random_range(1.0..6.0)];
                sp
            })
            .collect();
        sort_splats(&mut s);
        let p = [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)];
        let bg = [0.1, 0.6, 0.3];
        let (a1, a2) = (alpha_oracle(&s[0], p), alpha_oracle(&s[1], p));
        let c = composite(&s, p, bg);
        for k in 0..3 {
            let e = s[0].color[k] * a1 + s[1].color[k] * a2 * (1.0 - a1) + bg[k] * (1.0 - a1) * (1.0 - a2);
            assert!((c[k] - e).abs() < 1e-12, "case {i}");
        }
    }
}

#[test]
fn render_sequence_checks_camera_count() {
    let set = GaussianFrameSet::new(Tensor::new([2, 3, D], [random_scene(3, 1).into_data(), random_scene(3, 2).into_data()].concat()).unwrap()).unwrap();
    let cams = vec![cam(8, 8); 3];
    assert!(matches!(render_sequence(&set, &cams, [0.0; 3]), Err(stp4d::Error::Config(_))));
    let seq = render_sequence(&set, &cams[..1], [0.0; 3]).unwrap();
    assert_eq!(seq.len(), 2);
    assert_eq!(seq[1], render_frame_naive(&activate(&set.frame(1).unwrap()).unwrap(), &cams[0], [0.0; 3]).unwrap());
}

fn scene_3() -> Tensor {
    let mut raw = random_scene(3, 11);
    // keep splats inside the 8x8 view
    for (i, row) in raw.data_mut().chunks_mut(D).enumerate() {
        row[0] = -0.3 + 0.3 * i as f64;
        row[1] = 0.2 - 0.2 * i as f64;
        for k in 0..3 {
            row[SCALE + k] = 0.6f64.ln();
        }
    }
    raw
}

/// Gradient check of a weighted pixel sum; `free` selects the attribute
/// channels that act as parameters, the rest stay fixed.
fn render_check(free: &[usize], geometric: bool) -> GradCheckReport {
    let raw = scene_3();
    let mask = Tensor::from_fn([3, D], |i| if free.contains(&(i % D)) { 1.0 } else { 0.0 });
    let fixed = raw.zip_map(&mask, |v, m| v * (1.0 - m)).unwrap();
    let weights = Tensor::from_fn([8, 8, 3], |i| ((i * 37 % 11) as f64) / 11.0 - 0.4);
    let c = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], 40.0, 8, 8);
    let mut store = ParameterStore::new();
    store.insert("raw", raw).unwrap();
    gradient_check(
        &store,
        |g, p| {
            let raw = p.get("raw")?.mul(&g.constant(mask.clone()))?.add(&g.constant(fixed.clone()))?;
            let act = activate_var(&raw)?;
            let img = render_var(&act, &c, RenderOptions { background: [0.2, 0.1, 0.4], geometric_grads: geometric })?;
            Ok(img.mul(&g.constant(weights.clone()))?.sum())
        },
        &GradCheckOptions { h: 1e-6, tol: 1e-3, max_entries: None, seed: 0 },
    )
    .unwrap()
}

#[test]
fn color_opacity_gradients_match_finite_differences() {
    let r = render_check(&[COLOR, COLOR + 1, COLOR + 2, OPACITY], false);
    assert!(r.passed(), "{:?}", r.worst());
}

#[test]
fn geometric_gradients_match_finite_differences() {
    let r = render_check(&(0..D).collect::<Vec<_>>(), true);
    assert!(r.passed(), "{:?}", r.worst());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_and_residual_sum_to_one(seed in 0u64..10_000, n in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s: Vec<Splat2D> = (0..n).map(|k| {
            let mut sp = splat(k, [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)], rng.random_range(1.0..5.0), [0.5; 3], rng.random_range(0.0..1.0));
            sp.cov = [rng.random_range(0.5..8.0), rng.random_range(-0.4..0.4), rng.random_range(0.5..8.0)];
            sp
        }).collect();
        sort_splats(&mut s);
        let (w, t) = composite_weights(&s, [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)]);
        prop_assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuting_input_leaves_image_unchanged(seed in 0u64..1000) {
        let attrs = activate(&random_scene(12, seed)).unwrap();
        let c = cam(24, 24);
        let mut splats = project(&attrs, &c).unwrap();
        let a = rasterize(&splats, 24, 24, [0.0; 3]);
        splats.reverse();
        let b = rasterize(&splats, 24, 24, [0.0; 3]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn raising_alpha_moves_toward_color(seed in 0u64..1000, o1 in 0.05f64..0.9, bump in 0.01f64..0.09) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let front_color = [rng.random(), rng.random(), rng.random()];
        let back = splat(1, [4.0, 4.0], 3.0, [rng.random(), rng.random(), rng.random()], rng.random_range(0.1..0.9));
        let p = [4.2, 3.9];
        let lo = composite(&[splat(0, [4.0, 4.0], 1.0, front_color, o1), back], p, [0.3; 3]);
        let hi = composite(&[splat(0, [4.0, 4.0], 1.0, front_color, o1 + bump), back], p, [0.3; 3]);
        for k in 0..3 {
            prop_assert!((hi[k] - front_color[k]).abs() <= (lo[k] - front_color[k]).abs() + 1e-15);
        }
    }
}
