//! Pinhole rays, depth-guided sampling, and rendering along rays.
//!
//! Rendering converts per-sample signed distances to weights with a logistic
//! bump `w = sigmoid(s/tr) * sigmoid(-s/tr)` (maximal exactly on the
//! surface) and outputs *normalized* weighted sums of color and depth plus a
//! depth variance — not alpha compositing. Every ray carries the same sample
//! count so batches stay rectangular: stratified coverage of `[near, far]`
//! plus either uniform draws in the truncation window around the measured
//! depth (when there is one) or importance resamples from the stratified
//! weight histogram (when there is not).
//!
//! Camera convention: right handed, `+z` forward, image `v` down.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::par;
use crate::pose::Pose;
use crate::tensor::{Tape, Tensor, Var};

/// Pinhole camera model plus the factor that maps raw stored depth values to
/// meters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParam("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64)
            || !(self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidParam(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::InvalidParam("depth_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit direction through pixel (u, v) in the camera frame.
    pub fn dir_cam(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    /// Project a camera-frame point; `None` behind the camera.
    pub fn project_cam(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// A raw stored depth counts as a measurement only if it is finite and
/// strictly positive.
pub fn depth_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

/// Back-project pixels through a camera-to-world pose.
pub fn pixels_to_rays(intr: &Intrinsics, pose: &Pose, pixels: &[(f64, f64)]) -> Result<Vec<Ray>> {
    let origin = *pose.translation();
    pixels
        .iter()
        .map(|&(u, v)| {
            if !intr.contains_pixel(u, v) {
                return Err(Error::InvalidParam(format!(
                    "pixel ({u}, {v}) outside {}x{} image",
                    intr.width, intr.height
                )));
            }
            Ok(Ray {
                origin,
                dir: pose.rotate_dir(intr.dir_cam(u, v)),
            })
        })
        .collect()
}

/// Sample-count and range configuration for ray sampling.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCfg {
    /// Stratified samples covering [near, far].
    pub n_strat: usize,
    /// Extra samples per ray (surface window or importance resamples).
    pub n_imp: usize,
    pub near: f64,
    pub far: f64,
}

impl SampleCfg {
    pub fn validate(&self) -> Result<()> {
        if self.n_strat == 0 {
            return Err(Error::InvalidParam(
                "at least one stratified sample is required".into(),
            ));
        }
        if !(self.near < self.far) {
            return Err(Error::InvalidParam(format!(
                "near {} must be below far {}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn per_ray(&self) -> usize {
        self.n_strat + self.n_imp
    }

    fn bin_width(&self) -> f64 {
        (self.far - self.near) / self.n_strat as f64
    }
}

/// One uniform draw per equal sub-interval of [near, far]; ascending by
/// construction.
pub fn stratified_depths(rng: &mut impl Rng, cfg: &SampleCfg) -> Vec<f64> {
    let w = cfg.bin_width();
    (0..cfg.n_strat)
        .map(|k| cfg.near + (k as f64 + rng.random::<f64>()) * w)
        .collect()
}

/// Uniform draws in the truncation window around a measured depth.
pub fn surface_window_depths(rng: &mut impl Rng, d: f64, tr: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(d - tr..d + tr)).collect()
}

/// Resample depths from the stratified-bin histogram induced by `weights`
/// (one weight per stratified sample): pick a bin proportionally, then draw
/// uniformly inside it. All-zero histograms degrade to uniform bins.
pub fn importance_depths(
    rng: &mut impl Rng,
    cfg: &SampleCfg,
    weights: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    if weights.len() != cfg.n_strat {
        return Err(Error::InvalidParam(format!(
            "importance histogram has {} weights for {} bins",
            weights.len(),
            cfg.n_strat
        )));
    }
    let total: f64 = weights.iter().sum();
    let w = cfg.bin_width();
    Ok((0..n)
        .map(|_| {
            let bin = if total > 0.0 {
                let x = rng.random_range(0.0..total);
                let mut acc = 0.0;
                let mut chosen = cfg.n_strat - 1;
                for (k, wk) in weights.iter().enumerate() {
                    acc += wk;
                    if x < acc {
                        chosen = k;
                        break;
                    }
                }
                chosen
            } else {
                rng.random_range(0..cfg.n_strat)
            };
            cfg.near + (bin as f64 + rng.random::<f64>()) * w
        })
        .collect())
}

/// Logistic bump weight for a *metric* signed distance: maximal (0.25) on
/// the surface, symmetric, and decaying with |s|.
pub fn tsdf_to_weight(s_metric: f64, tr: f64) -> f64 {
    assert!(tr > 0.0, "truncation distance must be positive");
    let x = s_metric / tr;
    sigmoid(x) * sigmoid(-x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tape version of the weight bump applied to the field's truncation-
/// normalized tanh output: `w = sigmoid(s/tr) * sigmoid(-s/tr)`.
///
/// The normalized prediction is fed to the bell directly (not rescaled back
/// to metres first). Saturated free space then lands deep in the logistic
/// tails (`sigma(1/tr) ~ 0` for centimetre truncations) instead of at the
/// `sigma(1)sigma(-1) ~ 0.197` floor a metres-in bell would give, so weight
/// mass can actually concentrate at the zero crossing.
pub fn weights_from_sdf(tape: &Tape, sdf_tanh: Var, tr: f64) -> Result<Var> {
    if !(tr > 0.0) {
        return Err(Error::InvalidParam(
            "truncation distance must be positive".into(),
        ));
    }
    let x = tape.mul_scalar(sdf_tanh, 1.0 / tr);
    tape.mul(tape.sigmoid(x), tape.sigmoid(tape.neg(x)))
}

/// A rectangular batch of per-ray sample depths, ascending within each ray.
#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub rays: usize,
    pub per_ray: usize,
    /// `[rays * per_ray]`, ray-major.
    pub depths: Vec<f64>,
}

/// Draw the full per-ray depth set for a batch: stratified everywhere, plus
/// surface-window draws where the ray has a depth measurement and importance
/// resamples (from a gradient-free field probe) where it does not. RNG draws
/// happen in ray order regardless of parallelism.
pub fn sample_batch(
    rng: &mut impl Rng,
    cfg: &SampleCfg,
    tr: f64,
    rays: &[Ray],
    gt_depth: &[f64],
    field: &SceneField,
) -> Result<SampledBatch> {
    cfg.validate()?;
    if gt_depth.len() != rays.len() {
        return Err(Error::InvalidParam(format!(
            "{} depths for {} rays",
            gt_depth.len(),
            rays.len()
        )));
    }
    let strat: Vec<Vec<f64>> = rays.iter().map(|_| stratified_depths(rng, cfg)).collect();

    // One gradient-free probe over every measurement-less ray's stratified
    // samples gives the importance histograms.
    let need_probe: Vec<usize> = (0..rays.len())
        .filter(|&i| !depth_valid(gt_depth[i]))
        .collect();
    let mut histograms: Vec<Vec<f64>> = Vec::new();
    if !need_probe.is_empty() && cfg.n_imp > 0 {
        let pts: Vec<Vector3<f64>> = need_probe
            .iter()
            .flat_map(|&i| strat[i].iter().map(move |&d| rays[i].at(d)))
            .collect();
        let (_, sdf) = field.eval_points(&pts, 2048)?;
        histograms = sdf
            .chunks(cfg.n_strat)
            .map(|s| s.iter().map(|&v| tsdf_to_weight(v, tr)).collect())
            .collect();
    }

    let mut depths = Vec::with_capacity(rays.len() * cfg.per_ray());
    let mut probe_at = 0;
    for (i, mut d) in strat.into_iter().enumerate() {
        if cfg.n_imp > 0 {
            if depth_valid(gt_depth[i]) {
                d.extend(surface_window_depths(rng, gt_depth[i], tr, cfg.n_imp));
            } else {
                d.extend(importance_depths(rng, cfg, &histograms[probe_at], cfg.n_imp)?);
                probe_at += 1;
            }
        }
        d.sort_by(f64::total_cmp);
        depths.extend(d);
    }
    Ok(SampledBatch {
        rays: rays.len(),
        per_ray: cfg.per_ray(),
        depths,
    })
}

/// World-space sample points for a batch, `[rays * per_ray, 3]`.
pub fn batch_points(rays: &[Ray], batch: &SampledBatch) -> Tensor {
    Tensor::from_fn(batch.depths.len(), 3, |r, c| {
        rays[r / batch.per_ray].at(batch.depths[r])[c]
    })
}

/// Per-ray rendered outputs on the tape.
pub struct Rendered {
    /// `[R x 3]`.
    pub color: Var,
    /// `[R x 1]` meters.
    pub depth: Var,
    /// `[R x 1]` meters squared.
    pub depth_var: Var,
}

/// Normalized weighted rendering from explicit per-sample weights:
/// `c = sum(w c) / sum(w)`, `d = sum(w d) / sum(w)`,
/// `var = sum(w (d - d_hat)^2) / sum(w)`, denominators guarded by 1e-10.
pub fn render_from_weights(
    tape: &Tape,
    weights: Var,
    colors: Var,
    depths: &[f64],
    rays: usize,
) -> Result<Rendered> {
    let (n, wc) = tape.shape(weights);
    if wc != 1 || n == 0 || rays == 0 || n % rays != 0 {
        return Err(Error::shape("render", (n, wc), (rays, 1)));
    }
    if tape.shape(colors) != (n, 3) || depths.len() != n {
        return Err(Error::shape("render", tape.shape(colors), (n, 3)));
    }
    let per_ray = n / rays;

    let wsum = tape.sum_rows(tape.reshape(weights, rays, per_ray)?);
    let inv = tape.recip_eps(wsum, 1e-10);

    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let c = tape.narrow_cols(colors, ch, 1)?;
        let s = tape.sum_rows(tape.reshape(tape.mul(weights, c)?, rays, per_ray)?);
        channels.push(s);
    }
    let csum = tape.concat_cols(tape.concat_cols(channels[0], channels[1])?, channels[2])?;
    let color = tape.mul(csum, inv)?;

    let d = tape.constant(Tensor::new(n, 1, depths.to_vec()));
    let dsum = tape.sum_rows(tape.reshape(tape.mul(weights, d)?, rays, per_ray)?);
    let depth = tape.mul(dsum, inv)?;

    let ray_of: Vec<usize> = (0..n).map(|i| i / per_ray).collect();
    let diff = tape.sub(d, tape.gather_rows(depth, &ray_of)?)?;
    let vsum = tape.sum_rows(tape.reshape(tape.mul(weights, tape.square(diff))?, rays, per_ray)?);
    let depth_var = tape.mul(vsum, inv)?;

    Ok(Rendered {
        color,
        depth,
        depth_var,
    })
}

/// Rendering straight from field outputs (tanh-unit signed distances).
pub fn render_samples(
    tape: &Tape,
    colors: Var,
    sdf_tanh: Var,
    depths: &[f64],
    rays: usize,
    tr: f64,
) -> Result<Rendered> {
    let weights = weights_from_sdf(tape, sdf_tanh, tr)?;
    render_from_weights(tape, weights, colors, depths, rays)
}

/// Scalar-path rendering of a single ray (no tape); same math and epsilon.
pub fn render_ray_scalar(
    weights: &[f64],
    colors: &[[f64; 3]],
    depths: &[f64],
) -> ([f64; 3], f64, f64) {
    let wsum: f64 = weights.iter().sum();
    let inv = 1.0 / (wsum + 1e-10);
    let mut c = [0.0; 3];
    let mut d = 0.0;
    for i in 0..weights.len() {
        for k in 0..3 {
            c[k] += weights[i] * colors[i][k];
        }
        d += weights[i] * depths[i];
    }
    let c = [c[0] * inv, c[1] * inv, c[2] * inv];
    let d = d * inv;
    let mut var = 0.0;
    for i in 0..weights.len() {
        var += weights[i] * (depths[i] - d) * (depths[i] - d);
    }
    (c, d, var * inv)
}

/// A gradient-free full-frame render.
pub struct FrameRender {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub depth_var: Vec<f64>,
}

/// Render every pixel of a frame from the field. `guide` optionally carries
/// per-pixel measured depths (row-major, invalid entries skipped): guided
/// rays draw their extra samples in the truncation window, exactly as during
/// optimization; unguided rays importance-resample, which with a sharp
/// weight kernel can miss thin surface bands entirely. Deterministic for a
/// given seed: pixel rows are chunked with per-row generators.
pub fn render_frame(
    field: &SceneField,
    intr: &Intrinsics,
    pose: &Pose,
    cfg: &SampleCfg,
    tr: f64,
    seed: u64,
    guide: Option<&[f64]>,
) -> Result<FrameRender> {
    use rand::SeedableRng;
    cfg.validate()?;
    intr.validate()?;
    if let Some(g) = guide {
        if g.len() != intr.pixel_count() {
            return Err(Error::InvalidParam(format!(
                "depth guide has {} entries for {} pixels",
                g.len(),
                intr.pixel_count()
            )));
        }
    }
    let rows = intr.height;
    let results: Vec<Result<(Vec<[f64; 3]>, Vec<f64>, Vec<f64>)>> = par::map_range(rows, |row| {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(
            seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(row as u64),
        );
        let pixels: Vec<(f64, f64)> = (0..intr.width)
            .map(|x| (x as f64, row as f64))
            .collect();
        let rays = pixels_to_rays(intr, pose, &pixels)?;
        let gt_depth: Vec<f64> = match guide {
            Some(g) => g[row * intr.width..(row + 1) * intr.width].to_vec(),
            None => vec![f64::NAN; rays.len()],
        };
        let batch = sample_batch(&mut rng, cfg, tr, &rays, &gt_depth, field)?;
        let pts: Vec<Vector3<f64>> = (0..batch.depths.len())
            .map(|i| rays[i / batch.per_ray].at(batch.depths[i]))
            .collect();
        let (cols, sdf) = field.eval_points(&pts, 4096)?;
        let mut color = Vec::with_capacity(rays.len());
        let mut depth = Vec::with_capacity(rays.len());
        let mut var = Vec::with_capacity(rays.len());
        for r in 0..rays.len() {
            let lo = r * batch.per_ray;
            let hi = lo + batch.per_ray;
            let w: Vec<f64> = sdf[lo..hi]
                .iter()
                .map(|&s| tsdf_to_weight(s, tr))
                .collect();
            let (c, d, v) = render_ray_scalar(&w, &cols[lo..hi], &batch.depths[lo..hi]);
            color.push(c);
            depth.push(d);
            var.push(v);
        }
        Ok((color, depth, var))
    });

    let mut out = FrameRender {
        color: Vec::with_capacity(intr.pixel_count()),
        depth: Vec::with_capacity(intr.pixel_count()),
        depth_var: Vec::with_capacity(intr.pixel_count()),
    };
    for r in results {
        let (c, d, v) = r?;
        out.color.extend(c);
        out.depth.extend(d);
        out.depth_var.extend(v);
    }
    Ok(out)
}

/// Write a color buffer (values in [0, 1]) as 8-bit RGB PNG.
pub fn save_color_png(
    path: &std::path::Path,
    width: usize,
    height: usize,
    pixels: &[[f64; 3]],
) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidParam(format!(
            "{} pixels for {width}x{height} image",
            pixels.len()
        )));
    }
    let img = image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = pixels[y as usize * width + x as usize];
        image::Rgb(std::array::from_fn(|k| {
            (p[k].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    img.save(path)?;
    Ok(())
}

/// Write a metric depth buffer as 16-bit grayscale PNG at `scale` raw units
/// per meter. Invalid depths become 0, the no-measurement sentinel.
pub fn save_depth_png_scaled(
    path: &std::path::Path,
    width: usize,
    height: usize,
    depth_m: &[f64],
    scale: f64,
) -> Result<()> {
    if depth_m.len() != width * height {
        return Err(Error::InvalidParam(format!(
            "{} depths for {width}x{height} image",
            depth_m.len()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidParam("depth scale must be positive".into()));
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        width as u32,
        height as u32,
        |x, y| {
            let d = depth_m[y as usize * width + x as usize];
            let raw = if depth_valid(d) { (d * scale).round() } else { 0.0 };
            image::Luma([raw.clamp(0.0, 65535.0) as u16])
        },
    );
    img.save(path)?;
    Ok(())
}

/// Write a metric depth buffer as 16-bit grayscale PNG in millimeters.
pub fn save_depth_png_mm(
    path: &std::path::Path,
    width: usize,
    height: usize,
    depth_m: &[f64],
) -> Result<()> {
    save_depth_png_scaled(path, width, height, depth_m, 1000.0)
}
