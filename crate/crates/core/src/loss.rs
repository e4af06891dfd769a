//! Supervision terms over a rendered ray batch.
//!
//! Six terms: color and depth rendering errors, near/far in-truncation
//! signed-distance supervision (the band within 0.4 of the truncation
//! distance counts as "near"), free-space regularization toward +truncation
//! outside the band, and the depth-variance concentration term. Signed
//! distances are compared in metric units (tanh output times truncation).
//!
//! Sample membership depends only on measured and sample depths, never on
//! predictions, so the partition is constant per batch and the terms stay
//! differentiable through gathers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{depth_valid, Rendered};
use crate::tensor::{Tape, Tensor, Var};

/// Term weights for the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub sdf_near: f64,
    pub sdf_far: f64,
    pub free_space: f64,
    pub info: f64,
}

impl LossWeights {
    /// Pose-refinement preset.
    pub fn tracking() -> Self {
        LossWeights {
            rgb: 5.0,
            depth: 1.0,
            sdf_near: 200.0,
            sdf_far: 50.0,
            free_space: 5.0,
            info: 0.0,
        }
    }

    /// Map-update preset.
    pub fn mapping() -> Self {
        LossWeights {
            rgb: 5.0,
            depth: 0.1,
            sdf_near: 200.0,
            sdf_far: 10.0,
            free_space: 5.0,
            info: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rgb", self.rgb),
            ("depth", self.depth),
            ("sdf_near", self.sdf_near),
            ("sdf_far", self.sdf_far),
            ("free_space", self.free_space),
            ("info", self.info),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParam(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term scalar values plus bookkeeping, after evaluation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossReport {
    pub rgb: f64,
    pub depth: f64,
    pub sdf_near: f64,
    pub sdf_far: f64,
    pub free_space: f64,
    pub info: f64,
    pub total: f64,
    /// Rays in the batch.
    pub m: usize,
    /// Rays with a valid depth measurement.
    pub m_d: usize,
    /// Valid-depth rays whose sample set misses the truncation band
    /// entirely; they contribute zero to the signed-distance terms.
    pub empty_truncation_rays: usize,
}

/// Tape handles for each term; absent terms (no qualifying samples) count
/// as zero.
pub struct LossTerms {
    pub rgb: Var,
    pub depth: Option<Var>,
    pub sdf_near: Option<Var>,
    pub sdf_far: Option<Var>,
    pub free_space: Option<Var>,
    pub info: Option<Var>,
    pub m: usize,
    pub m_d: usize,
    pub empty_truncation_rays: usize,
}

/// Fraction of the truncation band treated as "near" the surface.
pub const NEAR_BAND_FRACTION: f64 = 0.4;

/// Build every loss term from rendered outputs and per-sample signed
/// distances (`[M*N x 1]`, tanh units, ray-major with `depths`).
pub fn loss_terms(
    tape: &Tape,
    rendered: &Rendered,
    sdf_tanh: Var,
    depths: &[f64],
    gt_color: &[[f64; 3]],
    gt_depth: &[f64],
    tr: f64,
) -> Result<LossTerms> {
    let m = gt_color.len();
    if m == 0 {
        return Err(Error::InvalidParam("loss needs at least one ray".into()));
    }
    if gt_depth.len() != m {
        return Err(Error::InvalidParam(format!(
            "{} ground-truth depths for {m} rays",
            gt_depth.len()
        )));
    }
    if tape.shape(rendered.color) != (m, 3) || tape.shape(rendered.depth) != (m, 1) {
        return Err(Error::shape("loss", tape.shape(rendered.color), (m, 3)));
    }
    let (total_samples, one) = tape.shape(sdf_tanh);
    if one != 1 || total_samples % m != 0 || depths.len() != total_samples {
        return Err(Error::shape("loss", (total_samples, one), (depths.len(), 1)));
    }
    if !(tr > 0.0) {
        return Err(Error::InvalidParam("truncation must be positive".into()));
    }
    let per_ray = total_samples / m;

    // Color: per-channel mean squared error over every ray.
    let gt_c = tape.constant(Tensor::from_fn(m, 3, |r, k| gt_color[r][k]));
    let rgb = tape.mean_all(tape.square(tape.sub(rendered.color, gt_c)?));

    let valid: Vec<usize> = (0..m).filter(|&r| depth_valid(gt_depth[r])).collect();
    let m_d = valid.len();

    let (mut depth_term, mut info_term) = (None, None);
    if m_d > 0 {
        let d_hat = tape.gather_rows(rendered.depth, &valid)?;
        let d_gt = tape.constant(Tensor::new(m_d, 1, valid.iter().map(|&r| gt_depth[r]).collect()));
        depth_term = Some(tape.mean_all(tape.square(tape.sub(d_hat, d_gt)?)));
        info_term = Some(tape.mean_all(tape.gather_rows(rendered.depth_var, &valid)?));
    }

    // Signed-distance supervision: partition each valid ray's samples by
    // distance to the measurement, then take means of per-ray means. The
    // per-sample coefficients fold in the metric scaling tr^2.
    let mut near = Partition::default();
    let mut far = Partition::default();
    let mut free = Partition::default();
    let mut empty_truncation_rays = 0;
    for &r in &valid {
        let d = gt_depth[r];
        let lo = r * per_ray;
        let (mut n_idx, mut f_idx, mut o_idx) = (Vec::new(), Vec::new(), Vec::new());
        for i in lo..lo + per_ray {
            let gap = (depths[i] - d).abs();
            if gap < NEAR_BAND_FRACTION * tr {
                n_idx.push(i);
            } else if gap < tr {
                f_idx.push(i);
            } else {
                o_idx.push(i);
            }
        }
        if n_idx.is_empty() && f_idx.is_empty() {
            empty_truncation_rays += 1;
        }
        let target = |i: usize| (d - depths[i]) / tr;
        near.extend(&n_idx, target, tr, m_d);
        far.extend(&f_idx, target, tr, m_d);
        free.extend(&o_idx, |_| 1.0, tr, m_d);
    }

    Ok(LossTerms {
        rgb,
        depth: depth_term,
        sdf_near: near.term(tape, sdf_tanh)?,
        sdf_far: far.term(tape, sdf_tanh)?,
        free_space: free.term(tape, sdf_tanh)?,
        info: info_term,
        m,
        m_d,
        empty_truncation_rays,
    })
}

/// Index set plus per-sample targets and coefficients for one squared-error
/// term of the form `sum_i w_i (s_i - t_i)^2`.
#[derive(Default)]
struct Partition {
    idx: Vec<usize>,
    target: Vec<f64>,
    coeff: Vec<f64>,
}

impl Partition {
    fn extend(&mut self, idx: &[usize], target: impl Fn(usize) -> f64, tr: f64, m_d: usize) {
        if idx.is_empty() {
            return;
        }
        // Mean over the ray's set, then mean over valid rays, in metric
        // units: tr^2 / (|set| * M_d) per sample.
        let w = tr * tr / (idx.len() * m_d) as f64;
        for &i in idx {
            self.idx.push(i);
            self.target.push(target(i));
            self.coeff.push(w);
        }
    }

    fn term(&self, tape: &Tape, sdf_tanh: Var) -> Result<Option<Var>> {
        if self.idx.is_empty() {
            return Ok(None);
        }
        let s = tape.gather_rows(sdf_tanh, &self.idx)?;
        let t = tape.constant(Tensor::new(self.idx.len(), 1, self.target.clone()));
        let w = tape.constant(Tensor::new(self.idx.len(), 1, self.coeff.clone()));
        Ok(Some(tape.sum_all(tape.mul(
            tape.square(tape.sub(s, t)?),
            w,
        )?)))
    }
}

impl LossTerms {
    /// Weighted total on the tape plus the evaluated report.
    pub fn total(&self, tape: &Tape, weights: &LossWeights) -> Result<(Var, LossReport)> {
        weights.validate()?;
        let value = |t: Option<Var>| t.map(|v| tape.item(v)).unwrap_or(0.0);
        let report_terms = [
            (weights.rgb, Some(self.rgb)),
            (weights.depth, self.depth),
            (weights.sdf_near, self.sdf_near),
            (weights.sdf_far, self.sdf_far),
            (weights.free_space, self.free_space),
            (weights.info, self.info),
        ];

        let mut total: Option<Var> = None;
        for (lambda, term) in report_terms {
            let Some(term) = term else { continue };
            if lambda == 0.0 {
                continue;
            }
            let scaled = tape.mul_scalar(term, lambda);
            total = Some(match total {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        let total = total.unwrap_or_else(|| tape.scalar(0.0));

        let report = LossReport {
            rgb: tape.item(self.rgb),
            depth: value(self.depth),
            sdf_near: value(self.sdf_near),
            sdf_far: value(self.sdf_far),
            free_space: value(self.free_space),
            info: value(self.info),
            total: tape.item(total),
            m: self.m,
            m_d: self.m_d,
            empty_truncation_rays: self.empty_truncation_rays,
        };
        Ok((total, report))
    }
}
