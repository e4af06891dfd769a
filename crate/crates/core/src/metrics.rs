//! Reconstruction and trajectory metrics.
//!
//! Surface quality is measured between point sets sampled area-uniformly
//! from triangle meshes (accuracy, completion, completion ratio at 5 cm) and
//! between depth maps rendered from many viewpoints (depth L1). Trajectory
//! quality is the absolute translation error, optionally after a closed-form
//! rigid alignment. All reported distances are centimeters.
//!
//! Nearest-neighbor queries are deliberately brute force: the desk-scale
//! sample counts keep the quadratic cost cheap, and exactness makes the
//! oracle comparisons in the test suite meaningful.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::par;
use crate::pose::Pose;
use crate::render::Intrinsics;
use crate::synth::SynthScene;

/// Completion-ratio distance threshold in meters.
pub const COMP_RATIO_THRESHOLD: f64 = 0.05;

/// Every reported metric, in the units its name states.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub depth_l1_cm: f64,
    pub acc_cm: f64,
    pub comp_cm: f64,
    pub comp_ratio_pct: f64,
    pub ate_mean_cm: f64,
    pub ate_rmse_cm: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.acc_cm < 0.0 || self.comp_cm < 0.0 {
            return Err(Error::Eval("accuracy and completion must be non-negative".into()));
        }
        if !(0.0..=100.0).contains(&self.comp_ratio_pct) {
            return Err(Error::Eval(format!(
                "completion ratio {} outside [0, 100]",
                self.comp_ratio_pct
            )));
        }
        Ok(())
    }
}

/// Absolute translation error between associated pose lists, in cm. With
/// `align` a closed-form rigid alignment (rotation and translation, unit
/// scale) that minimizes the total squared translation error is applied to
/// the estimate first.
pub fn metric_ate(estimated: &[Pose], gt: &[Pose], align: bool) -> Result<(f64, f64)> {
    if estimated.len() != gt.len() {
        return Err(Error::Eval(format!(
            "trajectory lengths differ: {} estimated vs {} ground truth",
            estimated.len(),
            gt.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::Eval("empty trajectories".into()));
    }
    let e: Vec<Vector3<f64>> = estimated.iter().map(|p| *p.translation()).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|p| *p.translation()).collect();

    let (r, t) = if align {
        rigid_alignment(&e, &g)
    } else {
        (Matrix3::identity(), Vector3::zeros())
    };

    let n = e.len() as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (ei, gi) in e.iter().zip(&g) {
        let err = (gi - (r * ei + t)).norm();
        sum += err;
        sum_sq += err * err;
    }
    Ok((100.0 * sum / n, 100.0 * (sum_sq / n).sqrt()))
}

/// Least-squares rotation and translation mapping `e` onto `g` (Horn's
/// method via SVD of the cross-covariance, determinant-corrected so the
/// result is a rotation, never a reflection).
fn rigid_alignment(e: &[Vector3<f64>], g: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = e.len() as f64;
    let ce = e.iter().sum::<Vector3<f64>>() / n;
    let cg = g.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (ei, gi) in e.iter().zip(g) {
        h += (gi - cg) * (ei - ce).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("SVD of a 3x3 always yields U");
    let vt = svd.v_t.expect("SVD of a 3x3 always yields V^T");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    (r, cg - r * ce)
}

/// Draw `n` points uniformly by area from the mesh surface. Degenerate
/// (zero-area) triangles are never selected; a mesh with no area yields an
/// empty set.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, rng: &mut ChaCha12Rng) -> Vec<Vector3<f64>> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let pick = rng.random_range(0.0..total);
            let ti = cumulative.partition_point(|&acc| acc <= pick).min(mesh.triangles.len() - 1);
            let t = mesh.triangles[ti];
            let (a, b, c) = (mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
            // sqrt trick: uniform over the triangle, not just its corner fan
            let r1: f64 = rng.random::<f64>();
            let r2: f64 = rng.random::<f64>();
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect()
}

fn nearest_sq(p: &Vector3<f64>, set: &[Vector3<f64>]) -> f64 {
    set.iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

/// Accuracy, completion, and completion ratio between point sets, in
/// (cm, cm, percent). `p` is sampled from the reconstruction, `q` from the
/// ground truth: accuracy is the mean distance from `p` into `q`, completion
/// the mean from `q` into `p`, and the ratio the percentage of `q` within
/// [`COMP_RATIO_THRESHOLD`] of `p`. Either side empty yields the infinite
/// sentinel (nothing reconstructed / nothing recovered).
pub fn point_set_acc_comp(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> (f64, f64, f64) {
    if p.is_empty() || q.is_empty() {
        return (f64::INFINITY, f64::INFINITY, 0.0);
    }
    let acc: f64 = par::map_range(p.len(), |i| nearest_sq(&p[i], q).sqrt())
        .iter()
        .sum::<f64>()
        / p.len() as f64;
    let to_p = par::map_range(q.len(), |i| nearest_sq(&q[i], p).sqrt());
    let comp = to_p.iter().sum::<f64>() / q.len() as f64;
    let within = to_p.iter().filter(|&&d| d < COMP_RATIO_THRESHOLD).count();
    (
        100.0 * acc,
        100.0 * comp,
        100.0 * within as f64 / q.len() as f64,
    )
}

/// Mesh-level accuracy/completion/ratio: sample `n_samples` points from each
/// surface and compare the sets. An empty reconstruction yields the infinite
/// sentinel with ratio 0.
pub fn metric_acc_comp(
    rec: &TriangleMesh,
    gt: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    use rand::SeedableRng;
    if n_samples == 0 {
        return Err(Error::Eval("acc/comp needs at least one sample".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let p = sample_surface(rec, n_samples, &mut rng);
    let q = sample_surface(gt, n_samples, &mut rng);
    if q.is_empty() {
        return Err(Error::Eval("ground-truth surface has no area".into()));
    }
    Ok(point_set_acc_comp(&p, &q))
}

/// Ground truth for depth rendering: either a mesh (rasterised like the
/// reconstruction) or the analytic scene (sphere-traced exactly).
pub enum GtSurface<'a> {
    Mesh(&'a TriangleMesh),
    Scene(&'a SynthScene),
}

/// Depth maps are camera-z (distance along the optical axis), so a
/// fronto-parallel wall renders at constant depth across the image.
pub fn raster_depth(mesh: &TriangleMesh, pose: &Pose, intr: &Intrinsics) -> Vec<f64> {
    let w = intr.width;
    let h = intr.height;
    let rot_t = pose.rotation().transpose();
    let cam: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| rot_t * (v - pose.translation()))
        .collect();

    let mut zbuf = vec![f64::INFINITY; w * h];
    const NEAR: f64 = 1e-4;
    for t in &mesh.triangles {
        let (a, b, c) = (cam[t[0]], cam[t[1]], cam[t[2]]);
        if a.z <= NEAR || b.z <= NEAR || c.z <= NEAR {
            continue;
        }
        let pa = (intr.fx * a.x / a.z + intr.cx, intr.fy * a.y / a.z + intr.cy);
        let pb = (intr.fx * b.x / b.z + intr.cx, intr.fy * b.y / b.z + intr.cy);
        let pc = (intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy);
        let area = (pb.0 - pa.0) * (pc.1 - pa.1) - (pb.1 - pa.1) * (pc.0 - pa.0);
        if area.abs() < 1e-14 {
            continue;
        }
        let u0 = pa.0.min(pb.0).min(pc.0).floor().max(0.0) as usize;
        let u1 = pa.0.max(pb.0).max(pc.0).ceil().min(w as f64 - 1.0) as usize;
        let v0 = pa.1.min(pb.1).min(pc.1).floor().max(0.0) as usize;
        let v1 = pa.1.max(pb.1).max(pc.1).ceil().min(h as f64 - 1.0) as usize;
        if u0 > u1 || v0 > v1 {
            continue;
        }
        for v in v0..=v1 {
            for u in u0..=u1 {
                let px = u as f64;
                let py = v as f64;
                let w0 = ((pb.0 - px) * (pc.1 - py) - (pb.1 - py) * (pc.0 - px)) / area;
                let w1 = ((pc.0 - px) * (pa.1 - py) - (pc.1 - py) * (pa.0 - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // 1/z interpolates linearly in screen space; z itself does not.
                let inv_z = w0 / a.z + w1 / b.z + w2 / c.z;
                let z = 1.0 / inv_z;
                let cell = &mut zbuf[v * w + u];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
    zbuf
}

fn scene_depth(scene: &SynthScene, pose: &Pose, intr: &Intrinsics) -> Vec<f64> {
    let w = intr.width;
    par::map_range(w * intr.height, |i| {
        let (u, v) = (i % w, i / w);
        let dir = intr.dir_cam(u as f64, v as f64);
        let dir_w = pose.rotation() * dir;
        match scene.trace(*pose.translation(), dir_w, 0.0) {
            Some(t) => t * dir.z,
            None => f64::INFINITY,
        }
    })
}

/// Mean absolute camera-z difference over all pixels of all views where both
/// surfaces are hit, in cm. Views where the reconstruction is hit nowhere
/// are excluded; the second return is how many were. All views excluded (or
/// no overlapping pixels at all) is an error.
pub fn metric_depth_l1(
    rec: &TriangleMesh,
    gt: &GtSurface,
    views: &[Pose],
    intr: &Intrinsics,
) -> Result<(f64, usize)> {
    if views.is_empty() {
        return Err(Error::Eval("depth L1 needs at least one view".into()));
    }
    intr.validate()?;
    rec.validate()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut excluded = 0usize;
    for pose in views {
        let rec_depth = raster_depth(rec, pose, intr);
        if rec_depth.iter().all(|d| !d.is_finite()) {
            excluded += 1;
            continue;
        }
        let gt_depth = match gt {
            GtSurface::Mesh(m) => raster_depth(m, pose, intr),
            GtSurface::Scene(s) => scene_depth(s, pose, intr),
        };
        for (r, g) in rec_depth.iter().zip(&gt_depth) {
            if r.is_finite() && g.is_finite() {
                sum += (r - g).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Eval(
            "no pixel hit both the reconstruction and the ground truth".into(),
        ));
    }
    Ok((100.0 * sum / count as f64, excluded))
}

/// Deterministic evaluation viewpoints: positions in the middle portion of
/// the bounds looking at jittered interior targets, with camera +y along
/// world -z so the look-at frame is always well defined for indoor scenes.
pub fn random_views(bounds: &crate::encoders::Bounds, n: usize, seed: u64) -> Result<Vec<Pose>> {
    use rand::SeedableRng;
    if n == 0 {
        return Err(Error::Eval("need at least one view".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let center = bounds.center();
    let ext = bounds.extent();
    let mut views = Vec::with_capacity(n);
    while views.len() < n {
        let eye = Vector3::new(
            center.x + ext.x * rng.random_range(-0.3..0.3),
            center.y + ext.y * rng.random_range(-0.3..0.3),
            center.z + ext.z * rng.random_range(-0.3..0.3),
        );
        let target = Vector3::new(
            center.x + ext.x * rng.random_range(-0.25..0.25),
            center.y + ext.y * rng.random_range(-0.25..0.25),
            center.z + ext.z * rng.random_range(-0.25..0.25),
        );
        let z = target - eye;
        if z.norm() < 1e-3 {
            continue;
        }
        let z = z.normalize();
        let hint = if z.y.abs() < 0.9 {
            Vector3::new(0.0, 1.0, 0.0)
        } else {
            Vector3::new(1.0, 0.0, 0.0)
        };
        let x = hint.cross(&z).normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_columns(&[x, y, z]);
        views.push(Pose::new(rot, eye)?);
    }
    Ok(views)
}
