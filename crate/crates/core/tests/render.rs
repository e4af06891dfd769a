//! Renderer checks: ray geometry round trips, the three sampling paths,
//! weight-bump shape, rendering against brute-force sums, invariances, and
//! gradients through the whole render pipeline.

use lgslam_core::encoders::Bounds;
use lgslam_core::field::{FieldCfg, FusionMode, SceneField};
use lgslam_core::pose::Pose;
use lgslam_core::render::{
    batch_points, importance_depths, pixels_to_rays, render_from_weights, render_frame,
    render_ray_scalar, render_samples, sample_batch, stratified_depths, surface_window_depths,
    tsdf_to_weight, Intrinsics, SampleCfg,
};
use lgslam_core::tensor::{Tape, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn test_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 62.0,
        fy: 58.0,
        cx: 39.5,
        cy: 29.5,
        width: 80,
        height: 60,
        depth_scale: 5000.0,
    }
}

#[test]
fn ray_reprojection_round_trip() {
    let intr = test_intrinsics();
    let mut rng = ChaCha12Rng::seed_from_u64(301);
    for _ in 0..40 {
        let pose = Pose::from_axis_angle(
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        );
        let u = rng.random_range(0.0..80.0);
        let v = rng.random_range(0.0..60.0);
        let rays = pixels_to_rays(&intr, &pose, &[(u, v)]).unwrap();
        let lambda = rng.random_range(0.3..8.0);
        let p_world = rays[0].at(lambda);
        let p_cam = pose.inverse_transform_point(p_world);
        let (pu, pv) = intr.project_cam(p_cam).unwrap();
        assert!((pu - u).abs() < 1e-6, "{pu} vs {u}");
        assert!((pv - v).abs() < 1e-6, "{pv} vs {v}");
    }
}

#[test]
fn translation_does_not_turn_rays() {
    let intr = test_intrinsics();
    let pixels: Vec<(f64, f64)> = vec![(0.5, 0.5), (39.5, 29.5), (79.0, 59.0)];
    let ident = pixels_to_rays(&intr, &Pose::identity(), &pixels).unwrap();
    let moved = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(1.0, -2.0, 0.5)).unwrap();
    let shifted = pixels_to_rays(&intr, &moved, &pixels).unwrap();
    for (a, b) in ident.iter().zip(&shifted) {
        assert!((a.dir - b.dir).norm() < 1e-15);
        assert!((b.origin - Vector3::new(1.0, -2.0, 0.5)).norm() < 1e-15);
    }
}

#[test]
fn stratified_sampling_hits_every_bin() {
    let cfg = SampleCfg {
        n_strat: 4,
        n_imp: 0,
        near: 0.0,
        far: 4.0,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    for _ in 0..100 {
        let d = stratified_depths(&mut rng, &cfg);
        assert_eq!(d.len(), 4);
        for (k, &dk) in d.iter().enumerate() {
            assert!(dk >= k as f64 && dk < (k + 1) as f64, "sample {dk} not in bin {k}");
        }
    }
}

#[test]
fn surface_window_stays_in_truncation_band() {
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    for _ in 0..50 {
        for d in surface_window_depths(&mut rng, 2.0, 0.06, 8) {
            assert!((1.94..2.06).contains(&d));
        }
    }
}

#[test]
fn importance_resampling_concentrates_on_the_dominant_bin() {
    let cfg = SampleCfg {
        n_strat: 8,
        n_imp: 0,
        near: 0.0,
        far: 8.0,
    };
    let mut weights = vec![1e-3; 8];
    weights[5] = 1.0;
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..1000 {
        for d in importance_depths(&mut rng, &cfg, &weights, 4).unwrap() {
            total += 1;
            if (5.0..6.0).contains(&d) {
                hits += 1;
            }
        }
    }
    assert!(
        hits as f64 / total as f64 >= 0.8,
        "only {hits}/{total} draws in the dominant bin"
    );
}

#[test]
fn weight_bump_is_even_and_strictly_peaked_at_zero() {
    let tr = 0.06;
    let peak = tsdf_to_weight(0.0, tr);
    let mut last = peak;
    for i in 1..400 {
        let s = i as f64 * 0.002;
        let w = tsdf_to_weight(s, tr);
        assert_eq!(w, tsdf_to_weight(-s, tr));
        assert!(w < last, "not strictly decreasing at s = {s}");
        last = w;
    }
}

#[test]
fn render_matches_bruteforce_sums() {
    let mut rng = ChaCha12Rng::seed_from_u64(29);
    let (rays, per_ray) = (5, 7);
    let n = rays * per_ray;
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..0.25)).collect();
    let c: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();

    let tape = Tape::new();
    let wv = tape.leaf(Tensor::new(n, 1, w.clone()));
    let cv = tape.leaf(Tensor::from_fn(n, 3, |r, k| c[r][k]));
    let out = render_from_weights(&tape, wv, cv, &d, rays).unwrap();
    let color = tape.value(out.color);
    let depth = tape.value(out.depth);
    let var = tape.value(out.depth_var);

    for r in 0..rays {
        let lo = r * per_ray;
        let hi = lo + per_ray;
        let (oc, od, ov) = render_ray_scalar(&w[lo..hi], &c[lo..hi], &d[lo..hi]);
        for k in 0..3 {
            assert!((color.get(r, k) - oc[k]).abs() < 1e-12);
        }
        assert!((depth.get(r, 0) - od).abs() < 1e-12);
        assert!((var.get(r, 0) - ov).abs() < 1e-12);

        // Convex-hull / range invariants per ray.
        for k in 0..3 {
            let lo_c = c[lo..hi].iter().map(|x| x[k]).fold(f64::MAX, f64::min);
            let hi_c = c[lo..hi].iter().map(|x| x[k]).fold(f64::MIN, f64::max);
            assert!(color.get(r, k) >= lo_c - 1e-9 && color.get(r, k) <= hi_c + 1e-9);
        }
        let lo_d = d[lo..hi].iter().cloned().fold(f64::MAX, f64::min);
        let hi_d = d[lo..hi].iter().cloned().fold(f64::MIN, f64::max);
        assert!(depth.get(r, 0) >= lo_d - 1e-9 && depth.get(r, 0) <= hi_d + 1e-9);
        assert!(var.get(r, 0) >= 0.0);
    }
}

#[test]
fn render_degenerate_cases() {
    // A single sample reproduces itself with zero variance.
    let (c, d, v) = render_ray_scalar(&[0.2], &[[0.3, 0.6, 0.9]], &[1.7]);
    for (got, want) in c.iter().zip([0.3, 0.6, 0.9]) {
        assert!((got - want).abs() < 1e-9);
    }
    assert!((d - 1.7).abs() < 1e-8);
    assert!(v.abs() < 1e-9);

    // Two equal weights at depths 1 and 3: mean 2, variance 1.
    let (_, d2, v2) = render_ray_scalar(
        &[0.25, 0.25],
        &[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
        &[1.0, 3.0],
    );
    assert!((d2 - 2.0).abs() < 1e-9);
    assert!((v2 - 1.0).abs() < 1e-8);

    // All-zero weights do not divide by zero.
    let (c0, d0, v0) = render_ray_scalar(&[0.0, 0.0], &[[0.5; 3], [0.5; 3]], &[1.0, 2.0]);
    assert!(c0.iter().all(|x| x.is_finite()) && d0.is_finite() && v0 >= 0.0);
}

#[test]
fn rendering_is_invariant_to_weight_scale() {
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let (rays, per_ray) = (3, 6);
    let n = rays * per_ray;
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.25)).collect();
    let c: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
        .collect();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();

    let run = |scale: f64| {
        let tape = Tape::new();
        let wv = tape.constant(Tensor::new(n, 1, w.iter().map(|x| x * scale).collect()));
        let cv = tape.constant(Tensor::from_fn(n, 3, |r, k| c[r][k]));
        let out = render_from_weights(&tape, wv, cv, &d, rays).unwrap();
        (
            tape.value(out.color).data().to_vec(),
            tape.value(out.depth).data().to_vec(),
            tape.value(out.depth_var).data().to_vec(),
        )
    };
    let (c1, d1, v1) = run(1.0);
    let (c2, d2, v2) = run(3.7);
    for (a, b) in c1.iter().zip(&c2).chain(d1.iter().zip(&d2)).chain(v1.iter().zip(&v2)) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

fn small_field(seed: u64) -> SceneField {
    let bounds = Bounds::new(Vector3::new(-0.2, -0.2, -0.2), Vector3::new(1.2, 1.2, 1.2)).unwrap();
    let cfg = FieldCfg {
        feature_channels: 6,
        oneblob_bins: 4,
        hidden: 5,
        geo_coarse_res: 0.7,
        geo_fine_res: 0.35,
        app_coarse_res: 0.7,
        app_fine_res: 0.35,
        omega: 0.5,
        fusion: FusionMode::Full,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    SceneField::new(bounds, cfg, &mut rng).unwrap()
}

fn set_param_element(field: &mut SceneField, k: usize, j: usize, value: f64) {
    let mut ps = field.params_mut();
    let p = &mut ps[k];
    let (val, m, v, t) = p.state();
    let (mut val, m, v) = (val.to_vec(), m.to_vec(), v.to_vec());
    val[j] = value;
    p.restore(&val, &m, &v, t).unwrap();
}

#[test]
fn render_gradients_match_finite_differences() {
    let intr = Intrinsics {
        fx: 20.0,
        fy: 20.0,
        cx: 8.0,
        cy: 6.0,
        width: 16,
        height: 12,
        depth_scale: 5000.0,
    };
    let cfg = SampleCfg {
        n_strat: 8,
        n_imp: 4,
        near: 0.05,
        far: 1.6,
    };
    let tr = 0.06;
    let h = 1e-5;

    for trial in 0..5u64 {
        let mut field = small_field(400 + trial);
        let mut rng = ChaCha12Rng::seed_from_u64(500 + trial);
        let pose = Pose::from_axis_angle(
            Vector3::new(0.02, -0.03, 0.01),
            Vector3::new(0.45, 0.5, -0.1),
        );
        let rays = pixels_to_rays(&intr, &pose, &[(4.5, 3.5), (11.0, 8.0)]).unwrap();
        // One measured ray (surface-window path), one without (importance
        // path); the depth set is frozen before differencing so the scalar
        // function under test is params -> rendered outputs.
        let batch = sample_batch(&mut rng, &cfg, tr, &rays, &[0.7, 0.0], &field).unwrap();
        let pts = batch_points(&rays, &batch);
        let pts_list: Vec<Vector3<f64>> = (0..batch.depths.len())
            .map(|i| Vector3::new(pts.get(i, 0), pts.get(i, 1), pts.get(i, 2)))
            .collect();

        let u: Vec<f64> = (0..rays.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vw: Vec<f64> = (0..rays.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vv: Vec<f64> = (0..rays.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Scalar projection of all rendered outputs, via the gradient-free
        // evaluation path; the finite-difference side of the check.
        let projected = |field: &SceneField| -> f64 {
            let (cols, sdf) = field.eval_points(&pts_list, 4096).unwrap();
            let mut acc = 0.0;
            for r in 0..rays.len() {
                let lo = r * batch.per_ray;
                let hi = lo + batch.per_ray;
                let w: Vec<f64> = sdf[lo..hi].iter().map(|&s| tsdf_to_weight(s, tr)).collect();
                let (c, d, var) = render_ray_scalar(&w, &cols[lo..hi], &batch.depths[lo..hi]);
                for k in 0..3 {
                    acc += u[r * 3 + k] * c[k];
                }
                acc += vw[r] * d + vv[r] * var;
            }
            acc
        };

        let tape = Tape::new();
        let vars = field.push(&tape, false);
        let pw = tape.constant(pts.clone());
        let out = field.eval(&tape, &vars, pw).unwrap();
        let rendered = render_samples(&tape, out.color, out.sdf, &batch.depths, rays.len(), tr).unwrap();
        let uc = tape.constant(Tensor::from_fn(rays.len(), 3, |r, k| u[r * 3 + k]));
        let wc = tape.constant(Tensor::new(rays.len(), 1, vw.clone()));
        let vc = tape.constant(Tensor::new(rays.len(), 1, vv.clone()));
        let total = tape.add(
            tape.sum_all(tape.mul(rendered.color, uc).unwrap()),
            tape.add(
                tape.sum_all(tape.mul(rendered.depth, wc).unwrap()),
                tape.sum_all(tape.mul(rendered.depth_var, vc).unwrap()),
            )
            .unwrap(),
        )
        .unwrap();
        let grads = tape.backward(total).unwrap();

        let var_list = SceneField::vars_list(&vars);
        for (k, var) in var_list.iter().enumerate() {
            let an: Vec<f64> = match grads.get(*var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; field.params()[k].len()],
            };
            let orig: Vec<f64> = field.params()[k].data().to_vec();
            for j in 0..orig.len() {
                set_param_element(&mut field, k, j, orig[j] + h);
                let fp = projected(&field);
                set_param_element(&mut field, k, j, orig[j] - h);
                let fm = projected(&field);
                set_param_element(&mut field, k, j, orig[j]);
                let fd = (fp - fm) / (2.0 * h);
                let tol = 1e-3 * an[j].abs().max(fd.abs()) + 1e-7;
                assert!(
                    (an[j] - fd).abs() <= tol,
                    "trial {trial} param {k}[{j}]: analytic {} vs fd {fd}",
                    an[j]
                );
            }
        }
    }
}

#[test]
fn sampled_batches_are_rectangular_and_sorted() {
    let field = small_field(77);
    let intr = test_intrinsics();
    let cfg = SampleCfg {
        n_strat: 6,
        n_imp: 3,
        near: 0.05,
        far: 2.0,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(811);
    let pixels: Vec<(f64, f64)> = (0..10).map(|i| (4.0 + 7.0 * i as f64, 30.0)).collect();
    let rays = pixels_to_rays(&intr, &Pose::identity(), &pixels).unwrap();
    let gt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.3 } else { 0.0 }).collect();
    let batch = sample_batch(&mut rng, &cfg, 0.06, &rays, &gt, &field).unwrap();
    assert_eq!(batch.rays, 10);
    assert_eq!(batch.per_ray, 9);
    assert_eq!(batch.depths.len(), 90);
    for r in 0..batch.rays {
        let s = &batch.depths[r * 9..(r + 1) * 9];
        assert!(s.windows(2).all(|p| p[0] <= p[1]), "ray {r} not sorted");
        if gt[r] > 0.0 {
            // The truncation-window draws must be present near the measurement.
            let near_surface = s.iter().filter(|&&d| (d - 1.3).abs() <= 0.06).count();
            assert!(near_surface >= 3);
        }
    }
}

#[test]
fn frame_render_is_deterministic_and_in_range() {
    let field = small_field(88);
    let intr = Intrinsics {
        fx: 14.0,
        fy: 14.0,
        cx: 8.0,
        cy: 6.0,
        width: 16,
        height: 12,
        depth_scale: 5000.0,
    };
    let cfg = SampleCfg {
        n_strat: 6,
        n_imp: 2,
        near: 0.05,
        far: 1.8,
    };
    let pose = Pose::identity();
    let a = render_frame(&field, &intr, &pose, &cfg, 0.06, 9, None).unwrap();
    let b = render_frame(&field, &intr, &pose, &cfg, 0.06, 9, None).unwrap();
    assert_eq!(a.color.len(), 192);
    for i in 0..a.color.len() {
        for k in 0..3 {
            assert_eq!(a.color[i][k].to_bits(), b.color[i][k].to_bits());
            assert!(a.color[i][k] > 0.0 && a.color[i][k] < 1.0);
        }
        assert_eq!(a.depth[i].to_bits(), b.depth[i].to_bits());
        assert!(a.depth[i] > cfg.near - 1e-6 && a.depth[i] < cfg.far + 1e-6);
        assert!(a.depth_var[i] >= 0.0);
    }
}

#[test]
fn png_export_round_trips() {
    use lgslam_core::render::{save_color_png, save_depth_png_mm};
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (8, 5);
    let color: Vec<[f64; 3]> = (0..w * h)
        .map(|i| {
            let t = i as f64 / (w * h) as f64;
            [t, 1.0 - t, 0.5]
        })
        .collect();
    let depth: Vec<f64> = (0..w * h).map(|i| 0.001 * (i as f64 + 1.0)).collect();

    let cpath = dir.path().join("c.png");
    let dpath = dir.path().join("d.png");
    save_color_png(&cpath, w, h, &color).unwrap();
    save_depth_png_mm(&dpath, w, h, &depth).unwrap();

    let cimg = image::open(&cpath).unwrap().to_rgb8();
    assert_eq!((cimg.width(), cimg.height()), (w as u32, h as u32));
    for (i, px) in cimg.pixels().enumerate() {
        for k in 0..3 {
            let want = (color[i][k] * 255.0).round() as u8;
            assert_eq!(px[k], want);
        }
    }

    let dimg = image::open(&dpath).unwrap().to_luma16();
    for (i, px) in dimg.pixels().enumerate() {
        // Stored in integer millimeters.
        assert_eq!(px[0], ((i + 1) as f64).round() as u16);
    }
}
