//! Dataset I/O: a synthetic sequence written to disk loads back as the same
//! frames (up to PNG quantization), and malformed directories fail loudly.

use lgslam_core::render::{depth_valid, Intrinsics};
use lgslam_core::synth::{
    emit_tum_dataset, make_trajectory, render_synth_frame, SensorNoise, SynthScene, Trajectory,
};
use lgslam_core::tum::{default_intrinsics, load_tum_sequence};

fn small_intr() -> Intrinsics {
    Intrinsics {
        fx: 36.0,
        fy: 36.0,
        cx: 24.0,
        cy: 18.0,
        width: 48,
        height: 36,
        depth_scale: 5000.0,
    }
}

fn emit_sequence(dir: &std::path::Path, n: usize, dt: f64) -> Vec<lgslam_core::synth::SynthFrame> {
    let scene = SynthScene::default_room();
    let intr = small_intr();
    let noise = SensorNoise {
        dropout: 0.03,
        ..SensorNoise::default()
    };
    let poses = make_trajectory(&Trajectory::default_orbit(), n).unwrap();
    let frames: Vec<_> = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut sf =
                render_synth_frame(&scene, pose, &intr, 0.0, &noise, i as u64).unwrap();
            sf.frame.timestamp = i as f64 * dt;
            sf
        })
        .collect();
    emit_tum_dataset(dir, &frames).unwrap();
    frames
}

#[test]
fn emitted_sequence_round_trips_up_to_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let emitted = emit_sequence(dir.path(), 4, 1.0 / 30.0);
    let seq = load_tum_sequence(dir.path()).unwrap();

    assert_eq!(seq.frames.len(), emitted.len());
    let gt = seq.gt.as_deref().expect("groundtruth.txt was written");
    assert_eq!(gt.len(), emitted.len());

    let intr = small_intr();
    for (loaded, orig) in seq.frames.iter().zip(&emitted) {
        assert!((loaded.timestamp - orig.frame.timestamp).abs() < 1e-6);
        assert_eq!(loaded.intr.width, intr.width);
        assert_eq!(loaded.intr.height, intr.height);
        assert_eq!(loaded.intr.depth_scale, intr.depth_scale);

        // Depth PNGs store round(d * scale) as u16, so half a raw unit is
        // the exact quantization bound; holes must stay holes.
        for (a, b) in loaded.depth.iter().zip(&orig.frame.depth) {
            if depth_valid(*b) {
                assert!((a - b).abs() <= 0.5 / intr.depth_scale + 1e-12);
            } else {
                assert!(!depth_valid(*a));
            }
        }
        for (a, b) in loaded.color.iter().zip(&orig.frame.color) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    // Poses pass through a quaternion encoding; that round trip is exact to
    // floating-point noise.
    for (loaded, orig) in gt.iter().zip(&emitted) {
        assert!((loaded.translation() - orig.gt_pose.translation()).norm() < 1e-12);
        assert!((loaded.rotation() - orig.gt_pose.rotation()).norm() < 1e-12);
    }
}

#[test]
fn offset_depth_timestamps_yield_a_zero_association_error() {
    let dir = tempfile::tempdir().unwrap();
    // Frames far enough apart that a 50 ms shift cannot reach a neighbor.
    emit_sequence(dir.path(), 3, 0.2);

    // Shift every depth timestamp by 50 ms, beyond the 20 ms tolerance.
    let depth_txt = std::fs::read_to_string(dir.path().join("depth.txt")).unwrap();
    let shifted: String = depth_txt
        .lines()
        .map(|line| {
            if line.starts_with('#') {
                format!("{line}\n")
            } else {
                let mut tok = line.split_whitespace();
                let ts: f64 = tok.next().unwrap().parse().unwrap();
                format!("{:.6} {}\n", ts + 0.05, tok.next().unwrap())
            }
        })
        .collect();
    std::fs::write(dir.path().join("depth.txt"), shifted).unwrap();

    let err = load_tum_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("no rgb/depth pair"), "{err}");
}

#[test]
fn raw_depth_value_is_divided_by_the_scale() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("rgb")).unwrap();
    std::fs::create_dir_all(dir.path().join("depth")).unwrap();

    std::fs::write(
        dir.path().join("intrinsics.txt"),
        "# fx fy cx cy width height depth_scale\n2 2 1 1 2 2 5000\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("rgb.txt"), "0.0 rgb/a.png\n").unwrap();
    std::fs::write(dir.path().join("depth.txt"), "0.0 depth/a.png\n").unwrap();

    image::RgbImage::from_pixel(2, 2, image::Rgb([128, 0, 255]))
        .save(dir.path().join("rgb/a.png"))
        .unwrap();
    let mut depth = image::ImageBuffer::<image::Luma<u16>, _>::new(2, 2);
    depth.put_pixel(0, 0, image::Luma([5000u16]));
    depth.put_pixel(1, 0, image::Luma([0u16]));
    depth.put_pixel(0, 1, image::Luma([2500u16]));
    depth.put_pixel(1, 1, image::Luma([1u16]));
    depth.save(dir.path().join("depth/a.png")).unwrap();

    let seq = load_tum_sequence(dir.path()).unwrap();
    assert_eq!(seq.frames.len(), 1);
    assert!(seq.gt.is_none());
    let d = &seq.frames[0].depth;
    assert_eq!(d[0], 1.0);
    assert!(d[1].is_nan());
    assert_eq!(d[2], 0.5);
    assert_eq!(d[3], 1.0 / 5000.0);
    assert_eq!(seq.frames[0].color[0], [128.0 / 255.0, 0.0, 1.0]);
}

#[test]
fn missing_index_files_are_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_tum_sequence(dir.path()).is_err());
}

#[test]
fn partial_groundtruth_coverage_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    emit_sequence(dir.path(), 3, 1.0 / 30.0);

    let gt_txt = std::fs::read_to_string(dir.path().join("groundtruth.txt")).unwrap();
    let truncated: String = gt_txt.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("groundtruth.txt"), truncated).unwrap();

    let err = load_tum_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("ground-truth"), "{err}");
}

#[test]
fn missing_sidecar_falls_back_to_published_intrinsics() {
    let d = default_intrinsics();
    assert_eq!((d.width, d.height), (640, 480));
    assert_eq!(d.depth_scale, 5000.0);
    assert_eq!(d.fx, 525.0);
}
