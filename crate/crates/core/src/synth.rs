//! Analytic ground truth: a box room with a few solid primitives, exact
//! signed distances, sphere-traced RGB-D rendering with a configurable
//! sensor model, and canned camera trajectories.
//!
//! Everything the end-to-end tests treat as "the world" comes from here, so
//! the geometry is kept exactly evaluable: depths are roots of a true signed
//! distance function rather than rasterized approximations.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::frame::FrameRGBD;
use crate::par;
use crate::pose::Pose;
use crate::render::{save_color_png, save_depth_png_scaled, Intrinsics};
use crate::{Error, Result};

/// Sphere-trace convergence tolerance, meters.
pub const TRACE_TOL: f64 = 1e-5;
/// Step cap per ray before a trace counts as a miss.
pub const TRACE_MAX_STEPS: usize = 256;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Cuboid {
        center: Vector3<f64>,
        half: Vector3<f64>,
    },
}

impl Shape {
    /// Exact signed distance; negative inside the solid.
    pub fn sdf(&self, p: Vector3<f64>) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Cuboid { center, half } => {
                let q = (p - center).abs() - half;
                q.map(|x| x.max(0.0)).norm() + q.max().min(0.0)
            }
        }
    }
}

/// A solid with a constant albedo.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// A sphere whose center oscillates along a fixed axis:
/// `c(t) = center + amplitude * sin(rate * t)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub amplitude: Vector3<f64>,
    /// Radians per second.
    pub rate: f64,
    pub albedo: [f64; 3],
}

impl Occluder {
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        self.center + self.amplitude * (self.rate * t).sin()
    }

    fn shape_at(&self, t: f64) -> Shape {
        Shape::Sphere {
            center: self.center_at(t),
            radius: self.radius,
        }
    }
}

/// Which surface is nearest to a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Wall,
    Object(usize),
    Occluder,
}

/// An axis-aligned box room with solid primitives inside, checkerboard
/// walls, one fixed light, and an optional moving occluder.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthScene {
    pub room_min: Vector3<f64>,
    pub room_max: Vector3<f64>,
    /// Checker tile edge length on the walls, meters.
    pub checker_period: f64,
    pub wall_albedo_a: [f64; 3],
    pub wall_albedo_b: [f64; 3],
    pub objects: Vec<Primitive>,
    pub occluder: Option<Occluder>,
    /// Direction light travels; need not be unit length.
    pub light_dir: Vector3<f64>,
    /// Ambient shading floor in (0, 1).
    pub ambient: f64,
}

fn albedo_ok(a: &[f64; 3]) -> bool {
    a.iter().all(|&v| v > 0.0 && v < 1.0)
}

impl SynthScene {
    /// The default 4 x 3 x 2.5 m room: floor at z = 0, three objects, no
    /// occluder. Fits comfortably inside coarse feature grids while giving
    /// color and depth losses plenty of structure.
    pub fn default_room() -> SynthScene {
        SynthScene {
            room_min: Vector3::new(-2.0, -1.5, 0.0),
            room_max: Vector3::new(2.0, 1.5, 2.5),
            checker_period: 0.5,
            wall_albedo_a: [0.82, 0.78, 0.72],
            wall_albedo_b: [0.32, 0.38, 0.52],
            objects: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: Vector3::new(0.9, 0.55, 0.6),
                        radius: 0.35,
                    },
                    albedo: [0.75, 0.28, 0.22],
                },
                Primitive {
                    shape: Shape::Cuboid {
                        center: Vector3::new(-0.8, -0.6, 0.4),
                        half: Vector3::new(0.35, 0.3, 0.4),
                    },
                    albedo: [0.24, 0.55, 0.3],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Vector3::new(-0.2, 0.9, 1.7),
                        radius: 0.25,
                    },
                    albedo: [0.8, 0.68, 0.2],
                },
            ],
            occluder: None,
            light_dir: Vector3::new(0.3, -0.2, -1.0),
            ambient: 0.35,
        }
    }

    /// A small fast sphere sweeping laterally near the default orbit's
    /// look-at target; covers well under a tenth of the image from the
    /// default trajectory.
    pub fn default_occluder() -> Occluder {
        Occluder {
            center: Vector3::new(0.2, 0.0, 1.15),
            radius: 0.1,
            amplitude: Vector3::new(0.0, 0.45, 0.0),
            rate: 2.5,
            albedo: [0.45, 0.45, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extent = self.room_max - self.room_min;
        if !extent.iter().all(|&e| e > 0.0) {
            return Err(Error::DegenerateBounds([extent.x, extent.y, extent.z]));
        }
        if !(self.checker_period > 0.0) {
            return Err(Error::InvalidParam("checker period must be positive".into()));
        }
        if !(self.ambient > 0.0 && self.ambient < 1.0) {
            return Err(Error::InvalidParam("ambient must lie in (0, 1)".into()));
        }
        if self.light_dir.norm() < 1e-12 {
            return Err(Error::InvalidParam("light direction must be nonzero".into()));
        }
        let mut albedos = vec![&self.wall_albedo_a, &self.wall_albedo_b];
        albedos.extend(self.objects.iter().map(|o| &o.albedo));
        if let Some(o) = &self.occluder {
            albedos.push(&o.albedo);
            if !(o.radius > 0.0) {
                return Err(Error::InvalidParam("occluder radius must be positive".into()));
            }
        }
        if !albedos.into_iter().all(albedo_ok) {
            return Err(Error::InvalidParam("albedos must lie strictly in (0, 1)".into()));
        }
        Ok(())
    }

    /// Distance to the nearest wall plane; positive in the room interior.
    /// Exact for points inside the room (the only region rays traverse).
    fn room_sdf(&self, p: Vector3<f64>) -> f64 {
        let a = p - self.room_min;
        let b = self.room_max - p;
        a.x.min(a.y).min(a.z).min(b.x).min(b.y).min(b.z)
    }

    /// Exact signed distance to the nearest surface at time `t`.
    pub fn sdf(&self, p: Vector3<f64>, t: f64) -> f64 {
        let mut d = self.room_sdf(p);
        for obj in &self.objects {
            d = d.min(obj.shape.sdf(p));
        }
        if let Some(o) = &self.occluder {
            d = d.min(o.shape_at(t).sdf(p));
        }
        d
    }

    /// The surface realizing the minimum distance at `p`.
    pub fn nearest_surface(&self, p: Vector3<f64>, t: f64) -> Surface {
        let mut best = (self.room_sdf(p), Surface::Wall);
        for (i, obj) in self.objects.iter().enumerate() {
            let d = obj.shape.sdf(p);
            if d < best.0 {
                best = (d, Surface::Object(i));
            }
        }
        if let Some(o) = &self.occluder {
            let d = o.shape_at(t).sdf(p);
            if d < best.0 {
                best = (d, Surface::Occluder);
            }
        }
        best.1
    }

    /// Checkerboard albedo on the wall nearest to `p`, indexed by the two
    /// coordinates tangent to that wall.
    fn wall_albedo(&self, p: Vector3<f64>) -> [f64; 3] {
        let a = p - self.room_min;
        let b = self.room_max - p;
        let dists = [a.x, a.y, a.z, b.x, b.y, b.z];
        let nearest = (0..6)
            .min_by(|&i, &j| dists[i].total_cmp(&dists[j]))
            .unwrap();
        let axis = nearest % 3;
        let (u, v) = match axis {
            0 => (p.y, p.z),
            1 => (p.x, p.z),
            _ => (p.x, p.y),
        };
        let iu = (u / self.checker_period).floor() as i64;
        let iv = (v / self.checker_period).floor() as i64;
        if (iu + iv).rem_euclid(2) == 0 {
            self.wall_albedo_a
        } else {
            self.wall_albedo_b
        }
    }

    pub fn albedo(&self, p: Vector3<f64>, t: f64) -> [f64; 3] {
        match self.nearest_surface(p, t) {
            Surface::Wall => self.wall_albedo(p),
            Surface::Object(i) => self.objects[i].albedo,
            Surface::Occluder => self.occluder.as_ref().unwrap().albedo,
        }
    }

    /// Outward surface normal by central differences of the distance field.
    pub fn normal(&self, p: Vector3<f64>, t: f64) -> Vector3<f64> {
        let h = 1e-6;
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[k] += h;
            lo[k] -= h;
            g[k] = self.sdf(hi, t) - self.sdf(lo, t);
        }
        let n = g.norm();
        if n < 1e-15 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            g / n
        }
    }

    /// Diffuse-shaded color at a surface point: albedo scaled by an ambient
    /// floor plus a Lambert term against the fixed light.
    pub fn shade(&self, p: Vector3<f64>, t: f64) -> [f64; 3] {
        let n = self.normal(p, t);
        let toward_light = -self.light_dir.normalize();
        let lambert = n.dot(&toward_light).max(0.0);
        let s = self.ambient + (1.0 - self.ambient) * lambert;
        let a = self.albedo(p, t);
        [a[0] * s, a[1] * s, a[2] * s]
    }

    /// Sphere-trace a unit-direction ray; returns the distance to the first
    /// surface, accurate to [`TRACE_TOL`], or None past the trace budget.
    pub fn trace(&self, origin: Vector3<f64>, dir: Vector3<f64>, t: f64) -> Option<f64> {
        let max_range = (self.room_max - self.room_min).norm() + 1.0;
        let mut s = 0.0;
        for _ in 0..TRACE_MAX_STEPS {
            let d = self.sdf(origin + dir * s, t);
            if d < TRACE_TOL {
                return Some(s);
            }
            s += d;
            if s > max_range {
                return None;
            }
        }
        None
    }
}

/// Depth-sensor corruption: Gaussian noise plus dropout holes, keyed purely
/// by (seed, frame, pixel) so frames are reproducible under any scheduling.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorNoise {
    /// Per-pixel depth noise sigma, meters.
    pub depth_sigma: f64,
    /// Probability that a measured pixel becomes a hole.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise {
            depth_sigma: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl SensorNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_sigma >= 0.0) {
            return Err(Error::InvalidParam("depth sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::InvalidParam("dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one pixel of one frame, independent of every other pixel.
fn pixel_rng(seed: u64, frame: u64, pixel: u64) -> ChaCha12Rng {
    let key = mix64(mix64(mix64(seed ^ 0x9E37_79B9_7F4A_7C15).wrapping_add(frame)).wrapping_add(pixel));
    ChaCha12Rng::seed_from_u64(key)
}

/// A rendered ground-truth frame: the (possibly corrupted) sensor view plus
/// everything an oracle needs — the exact pose, the noise-free depths, and
/// which rays actually converged onto a surface.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub frame: FrameRGBD,
    pub gt_pose: Pose,
    /// Noise-free sphere-traced depth; NaN where the trace missed.
    pub depth_true: Vec<f64>,
    /// Per-pixel trace convergence.
    pub hit: Vec<bool>,
}

/// Render one RGB-D frame at scene time `t`. Pixel (x, y) looks through
/// image coordinates exactly (x, y). `frame_index` keys the sensor noise.
pub fn render_synth_frame(
    scene: &SynthScene,
    pose: &Pose,
    intr: &Intrinsics,
    t: f64,
    noise: &SensorNoise,
    frame_index: u64,
) -> Result<SynthFrame> {
    scene.validate()?;
    intr.validate()?;
    noise.validate()?;
    let origin = *pose.translation();
    if scene.sdf(origin, t) <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "camera position {:?} is outside the room's free space",
            origin
        )));
    }

    let w = intr.width;
    let n = intr.pixel_count();
    struct Px {
        color: [f64; 3],
        depth: f64,
        depth_true: f64,
        hit: bool,
    }
    let pixels = par::map_range(n, |i| {
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let dir = pose.rotate_dir(intr.dir_cam(u, v));
        match scene.trace(origin, dir, t) {
            Some(s) => {
                let p = origin + dir * s;
                let mut rng = pixel_rng(noise.seed, frame_index, i as u64);
                let dropped = rng.random::<f64>() < noise.dropout;
                let depth = if dropped {
                    f64::NAN
                } else if noise.depth_sigma > 0.0 {
                    let d = s + Normal::new(0.0, noise.depth_sigma).unwrap().sample(&mut rng);
                    // A draw this far out is no measurement at all.
                    if d > 0.0 {
                        d
                    } else {
                        f64::NAN
                    }
                } else {
                    s
                };
                Px {
                    color: scene.shade(p, t),
                    depth,
                    depth_true: s,
                    hit: true,
                }
            }
            None => Px {
                color: [0.0; 3],
                depth: f64::NAN,
                depth_true: f64::NAN,
                hit: false,
            },
        }
    });

    let mut frame = FrameRGBD {
        intr: *intr,
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        timestamp: t,
    };
    let mut depth_true = Vec::with_capacity(n);
    let mut hit = Vec::with_capacity(n);
    for px in pixels {
        frame.color.push(px.color);
        frame.depth.push(px.depth);
        depth_true.push(px.depth_true);
        hit.push(px.hit);
    }
    Ok(SynthFrame {
        frame,
        gt_pose: pose.clone(),
        depth_true,
        hit,
    })
}

/// Camera paths through the room. All of them aim at a fixed target with
/// world +z as up.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Static {
        eye: Vector3<f64>,
        target: Vector3<f64>,
    },
    /// Full circle of the given radius around the target, eye height fixed.
    Orbit {
        target: Vector3<f64>,
        radius: f64,
        height: f64,
    },
    /// Partial sweep from `start` over `sweep` radians.
    Arc {
        target: Vector3<f64>,
        radius: f64,
        height: f64,
        start: f64,
        sweep: f64,
    },
}

impl Trajectory {
    /// The default 20-frame-friendly orbit inside [`SynthScene::default_room`].
    pub fn default_orbit() -> Trajectory {
        Trajectory::Orbit {
            target: Vector3::new(0.2, 0.0, 1.0),
            radius: 1.1,
            height: 1.3,
        }
    }
}

fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
    Pose::look_at(eye, target, Vector3::z())
}

/// Generate `frames` poses along a trajectory.
pub fn make_trajectory(traj: &Trajectory, frames: usize) -> Result<Vec<Pose>> {
    if frames == 0 {
        return Err(Error::InvalidParam("trajectory needs at least one frame".into()));
    }
    match *traj {
        Trajectory::Static { eye, target } => {
            let pose = look_at(eye, target)?;
            Ok(vec![pose; frames])
        }
        Trajectory::Orbit {
            target,
            radius,
            height,
        } => circle_poses(target, radius, height, 0.0, std::f64::consts::TAU, frames, false),
        Trajectory::Arc {
            target,
            radius,
            height,
            start,
            sweep,
        } => circle_poses(target, radius, height, start, sweep, frames, true),
    }
}

fn circle_poses(
    target: Vector3<f64>,
    radius: f64,
    height: f64,
    start: f64,
    sweep: f64,
    frames: usize,
    inclusive: bool,
) -> Result<Vec<Pose>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParam("circle radius must be positive".into()));
    }
    if sweep.abs() < 1e-12 {
        return Err(Error::InvalidParam("sweep must be nonzero".into()));
    }
    // A full orbit spaces frames over [0, tau); an arc includes both ends.
    let denom = if inclusive { (frames - 1).max(1) } else { frames };
    (0..frames)
        .map(|i| {
            let a = start + sweep * i as f64 / denom as f64;
            let eye = Vector3::new(
                target.x + radius * a.cos(),
                target.y + radius * a.sin(),
                height,
            );
            look_at(eye, target)
        })
        .collect()
}

/// Emit frames to `dir` in TUM RGB-D layout: `rgb/`, `depth/`, `rgb.txt`,
/// `depth.txt`, `groundtruth.txt`, plus an `intrinsics.txt` sidecar. Depth
/// PNGs hold `round(depth * depth_scale)` as 16-bit values with 0 marking a
/// hole, so values round-trip through the loader up to quantization.
pub fn emit_tum_dataset(dir: &Path, frames: &[SynthFrame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::InvalidParam("no frames to emit".into()));
    }
    let intr = frames[0].frame.intr;
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;

    let mut rgb_txt = String::from("# color images\n# timestamp filename\n");
    let mut depth_txt = String::from("# depth maps\n# timestamp filename\n");
    let mut gt_txt = String::from("# ground truth trajectory\n# timestamp tx ty tz qx qy qz qw\n");

    for sf in frames {
        let f = &sf.frame;
        f.validate()?;
        let ts = format!("{:.6}", f.timestamp);
        let rgb_rel = format!("rgb/{ts}.png");
        let depth_rel = format!("depth/{ts}.png");
        save_color_png(&dir.join(&rgb_rel), f.intr.width, f.intr.height, &f.color)?;
        save_depth_png_scaled(
            &dir.join(&depth_rel),
            f.intr.width,
            f.intr.height,
            &f.depth,
            f.intr.depth_scale,
        )?;
        rgb_txt.push_str(&format!("{ts} {rgb_rel}\n"));
        depth_txt.push_str(&format!("{ts} {depth_rel}\n"));

        let t = sf.gt_pose.translation();
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            *sf.gt_pose.rotation(),
        ));
        gt_txt.push_str(&format!(
            "{ts} {} {} {} {} {} {} {}\n",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }

    std::fs::write(dir.join("rgb.txt"), rgb_txt)?;
    std::fs::write(dir.join("depth.txt"), depth_txt)?;
    std::fs::write(dir.join("groundtruth.txt"), gt_txt)?;

    let mut intr_txt = Vec::new();
    writeln!(
        intr_txt,
        "# fx fy cx cy width height depth_scale\n{} {} {} {} {} {} {}",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, intr.depth_scale
    )?;
    std::fs::write(dir.join("intrinsics.txt"), intr_txt)?;
    Ok(())
}
