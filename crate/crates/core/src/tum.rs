//! TUM RGB-D dataset ingestion and trajectory text I/O.
//!
//! A sequence directory holds `rgb.txt` and `depth.txt` index files
//! (timestamp + relative path per line), the referenced PNGs, and optionally
//! `groundtruth.txt` with quaternion poses. Color and depth streams are
//! associated greedily by nearest timestamp within a 20 ms tolerance, the
//! same policy as the dataset's reference tooling. Depth PNGs store
//! `round(meters * depth_scale)` as 16-bit values; raw 0 marks a hole and
//! loads as NaN.
//!
//! Real sequences ship no intrinsics file, so a missing `intrinsics.txt`
//! sidecar falls back to the dataset's published Freiburg defaults.

use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::frame::FrameRGBD;
use crate::pose::Pose;
use crate::render::Intrinsics;

/// Association tolerance between color, depth, and ground-truth timestamps.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// A loaded sequence: frames in timestamp order, plus the ground-truth pose
/// per frame when the directory provides one.
#[derive(Debug)]
pub struct TumSequence {
    pub frames: Vec<FrameRGBD>,
    pub gt: Option<Vec<Pose>>,
}

/// Published Freiburg camera parameters, used when no sidecar is present.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 525.0,
        fy: 525.0,
        cx: 319.5,
        cy: 239.5,
        width: 640,
        height: 480,
        depth_scale: 5000.0,
    }
}

fn parse_index(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let (ts, rel) = match (tok.next(), tok.next()) {
            (Some(ts), Some(rel)) => (ts, rel),
            _ => {
                return Err(Error::Dataset(format!(
                    "{} line {}: expected 'timestamp filename'",
                    path.display(),
                    ln + 1
                )))
            }
        };
        let ts: f64 = ts.parse().map_err(|_| {
            Error::Dataset(format!("{} line {}: bad timestamp {ts}", path.display(), ln + 1))
        })?;
        entries.push((ts, PathBuf::from(rel)));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(entries)
}

/// Greedy best-pair association: consider every pair within tolerance,
/// closest time difference first, never reusing an entry from either side.
fn associate(a: &[f64], b: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    let mut lo = 0usize;
    for (i, &ta) in a.iter().enumerate() {
        while lo < b.len() && b[lo] < ta - tol {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + tol {
            candidates.push(((ta - b[j]).abs(), i, j));
            j += 1;
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn load_intrinsics(dir: &Path) -> Result<Intrinsics> {
    let path = dir.join("intrinsics.txt");
    if !path.exists() {
        return Ok(default_intrinsics());
    }
    let text = std::fs::read_to_string(&path)?;
    let nums: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Dataset(format!("bad intrinsics token {t}")))
        })
        .collect::<Result<_>>()?;
    if nums.len() != 7 {
        return Err(Error::Dataset(format!(
            "intrinsics.txt needs 7 values (fx fy cx cy width height depth_scale), got {}",
            nums.len()
        )));
    }
    let intr = Intrinsics {
        fx: nums[0],
        fy: nums[1],
        cx: nums[2],
        cy: nums[3],
        width: nums[4] as usize,
        height: nums[5] as usize,
        depth_scale: nums[6],
    };
    intr.validate()?;
    Ok(intr)
}

fn load_color(path: &Path, intr: &Intrinsics) -> Result<Vec<[f64; 3]>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    if (img.width() as usize, img.height() as usize) != (intr.width, intr.height) {
        return Err(Error::Dataset(format!(
            "{} is {}x{}, intrinsics say {}x{}",
            path.display(),
            img.width(),
            img.height(),
            intr.width,
            intr.height
        )));
    }
    Ok(img
        .pixels()
        .map(|p| std::array::from_fn(|k| p.0[k] as f64 / 255.0))
        .collect())
}

fn load_depth(path: &Path, intr: &Intrinsics) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", path.display())))?
        .to_luma16();
    if (img.width() as usize, img.height() as usize) != (intr.width, intr.height) {
        return Err(Error::Dataset(format!(
            "{} is {}x{}, intrinsics say {}x{}",
            path.display(),
            img.width(),
            img.height(),
            intr.width,
            intr.height
        )));
    }
    Ok(img
        .pixels()
        .map(|p| {
            let raw = p.0[0];
            if raw == 0 {
                f64::NAN
            } else {
                raw as f64 / intr.depth_scale
            }
        })
        .collect())
}

fn parse_groundtruth(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::Dataset(format!(
                        "{} line {}: bad number {t}",
                        path.display(),
                        ln + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if tok.len() != 8 {
            return Err(Error::Dataset(format!(
                "{} line {}: expected 'timestamp tx ty tz qx qy qz qw'",
                path.display(),
                ln + 1
            )));
        }
        let q = UnitQuaternion::new_normalize(Quaternion::new(tok[7], tok[4], tok[5], tok[6]));
        let pose = Pose::new(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(tok[1], tok[2], tok[3]),
        )?;
        entries.push((tok[0], pose));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(entries)
}

/// Load a sequence directory. Frames are ordered by color timestamp; when
/// `groundtruth.txt` exists every frame must find a pose within the
/// association tolerance, so `gt` (if present) is index-aligned with
/// `frames`.
pub fn load_tum_sequence(dir: &Path) -> Result<TumSequence> {
    let rgb = parse_index(&dir.join("rgb.txt"))?;
    let depth = parse_index(&dir.join("depth.txt"))?;
    if rgb.is_empty() || depth.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: empty rgb or depth index",
            dir.display()
        )));
    }
    let intr = load_intrinsics(dir)?;

    let rgb_ts: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let depth_ts: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let pairs = associate(&rgb_ts, &depth_ts, ASSOCIATION_TOLERANCE);
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no rgb/depth pair within {} s",
            dir.display(),
            ASSOCIATION_TOLERANCE
        )));
    }

    let mut frames = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let frame = FrameRGBD {
            intr,
            color: load_color(&dir.join(&rgb[i].1), &intr)?,
            depth: load_depth(&dir.join(&depth[j].1), &intr)?,
            timestamp: rgb[i].0,
        };
        frame.validate()?;
        frames.push(frame);
    }

    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        let entries = parse_groundtruth(&gt_path)?;
        let gt_ts: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let frame_ts: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
        let assoc = associate(&frame_ts, &gt_ts, ASSOCIATION_TOLERANCE);
        if assoc.len() != frames.len() {
            return Err(Error::Dataset(format!(
                "{}: only {} of {} frames have a ground-truth pose within {} s",
                dir.display(),
                assoc.len(),
                frames.len(),
                ASSOCIATION_TOLERANCE
            )));
        }
        Some(assoc.into_iter().map(|(_, j)| entries[j].1).collect())
    } else {
        None
    };

    Ok(TumSequence { frames, gt })
}

/// Write poses in the dataset's trajectory text format
/// (`timestamp tx ty tz qx qy qz qw`, one line per pose).
pub fn write_tum_trajectory(path: &Path, timestamps: &[f64], poses: &[Pose]) -> Result<()> {
    if timestamps.len() != poses.len() {
        return Err(Error::InvalidParam(format!(
            "{} timestamps for {} poses",
            timestamps.len(),
            poses.len()
        )));
    }
    let mut out = String::from("# trajectory\n# timestamp tx ty tz qx qy qz qw\n");
    for (ts, pose) in timestamps.iter().zip(poses) {
        let t = pose.translation();
        let q = UnitQuaternion::from_matrix(pose.rotation());
        out.push_str(&format!(
            "{ts:.6} {} {} {} {} {} {} {}\n",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a trajectory in the same text format back into poses.
pub fn read_tum_trajectory(path: &Path) -> Result<(Vec<f64>, Vec<Pose>)> {
    let entries = parse_groundtruth(path)?;
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{}: empty trajectory", path.display())));
    }
    Ok(entries.into_iter().unzip())
}
