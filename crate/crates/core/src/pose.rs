//! Rigid camera poses and their differentiable tangent-space updates.
//!
//! A [`Pose`] maps camera coordinates to world coordinates (`x_w = R x_c + t`).
//! The camera frame is right-handed with +x right, +y down and +z forward
//! (viewing direction); the synthetic world uses +z up.
//!
//! Optimization never touches `R` directly: each solve works in a local chart
//! around a frozen base pose. A 6-vector tangent `xi = (omega, u)` retracts as
//! `R = R_base (I + A K + B K^2)`, `t = t_base + u`, where `K` is the skew
//! matrix of `omega`, `A = sin(theta)/theta`, `B = (1-cos(theta))/theta^2` —
//! the exact exponential of the rotation part, evaluated through series-safe
//! tape ops so gradients stay finite at `theta = 0`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Camera-to-world rigid transform.
///
/// Serialization stores `r` and `t` verbatim; deserialized poses from
/// untrusted sources should be passed through [`Pose::orthonormalized`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Build from parts; the rotation is snapped to the nearest orthonormal
    /// matrix and rejected if it is not close to one to begin with.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let drift = (r.transpose() * r - Matrix3::identity()).norm();
        if !drift.is_finite() || drift > 1e-3 {
            return Err(Error::InvalidParam(format!(
                "rotation is not orthonormal (drift {drift:.2e})"
            )));
        }
        Ok(Pose { r, t }.orthonormalized())
    }

    pub fn from_axis_angle(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Pose::identity().retract(&[omega.x, omega.y, omega.z, t.x, t.y, t.z])
    }

    /// Camera at `eye` looking toward `target`, with image-down opposite
    /// `up`. Errors when the view direction is parallel to `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let f = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidParam("look_at: eye equals target".into()))?;
        let down = (up.dot(&f) * f - up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::InvalidParam("look_at: view direction parallel to up".into()))?;
        let x = down.cross(&f);
        Ok(Pose {
            r: Matrix3::from_columns(&[x, down, f]),
            t: eye,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn rotate_dir(&self, d: Vector3<f64>) -> Vector3<f64> {
        self.r * d
    }

    pub fn inverse_transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (p - self.t)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    /// Apply a tangent update (same chart as [`retract_on_tape`]).
    pub fn retract(&self, xi: &[f64; 6]) -> Pose {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let t2 = omega.norm_squared();
        let (a, b) = rodrigues_coeffs(t2);
        let k = skew(omega);
        let dr = Matrix3::identity() + a * k + b * (k * k);
        Pose {
            r: self.r * dr,
            t: self.t + Vector3::new(xi[3], xi[4], xi[5]),
        }
        .orthonormalized()
    }

    /// Snap the rotation back onto SO(3) via SVD (guards against drift
    /// accumulating over many retractions).
    pub fn orthonormalized(&self) -> Pose {
        let drift = (self.r.transpose() * self.r - Matrix3::identity()).norm();
        if drift < 1e-12 {
            return *self;
        }
        let svd = self.r.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            // Flip the last column of U to stay in SO(3), not O(3).
            let mut uf = u;
            uf.column_mut(2).neg_mut();
            r = uf * vt;
        }
        Pose { r, t: self.t }
    }
}

fn rodrigues_coeffs(t2: f64) -> (f64, f64) {
    if t2 < 1e-8 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        let th = t2.sqrt();
        (th.sin() / th, (1.0 - th.cos()) / t2)
    }
}

fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// A pose whose rotation/translation are tape nodes: `r` is `[3 x 3]`,
/// `t` is `[1 x 3]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVar {
    pub r: Var,
    pub t: Var,
}

/// so(3) generator matrices: `skew(w) = x Gx + y Gy + z Gz`.
const GX: [f64; 9] = [0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0];
const GY: [f64; 9] = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0];
const GZ: [f64; 9] = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];

/// Record the retraction of `xi` (a `[1 x 6]` tape node) around `base`.
pub fn retract_on_tape(tape: &Tape, base: &Pose, xi: Var) -> Result<PoseVar> {
    if tape.shape(xi) != (1, 6) {
        return Err(Error::shape("retract", tape.shape(xi), (1, 6)));
    }
    let omega = tape.narrow_cols(xi, 0, 3)?;
    let u = tape.narrow_cols(xi, 3, 3)?;

    let t2 = tape.sum_all(tape.square(omega));
    let a = tape.sinc_sqrt(t2);
    let b = tape.cosc_sqrt(t2);

    let gx = tape.constant(Tensor::new(3, 3, GX.to_vec()));
    let gy = tape.constant(Tensor::new(3, 3, GY.to_vec()));
    let gz = tape.constant(Tensor::new(3, 3, GZ.to_vec()));
    let wx = tape.narrow_cols(omega, 0, 1)?;
    let wy = tape.narrow_cols(omega, 1, 1)?;
    let wz = tape.narrow_cols(omega, 2, 1)?;
    let k = tape.add(
        tape.add(tape.mul(wx, gx)?, tape.mul(wy, gy)?)?,
        tape.mul(wz, gz)?,
    )?;
    let k2 = tape.matmul(k, k)?;

    let eye = tape.constant(Tensor::identity(3));
    let dr = tape.add(tape.add(eye, tape.mul(a, k)?)?, tape.mul(b, k2)?)?;

    let base_r = tape.constant(Tensor::from_fn(3, 3, |i, j| base.r[(i, j)]));
    let r = tape.matmul(base_r, dr)?;

    let base_t = tape.constant(Tensor::row(&[base.t.x, base.t.y, base.t.z]));
    let t = tape.add(base_t, u)?;
    Ok(PoseVar { r, t })
}

impl PoseVar {
    /// Insert a fixed pose as constant leaves (no gradient flows to it).
    pub fn constant(tape: &Tape, pose: &Pose) -> Self {
        PoseVar {
            r: tape.constant(Tensor::from_fn(3, 3, |i, j| pose.r[(i, j)])),
            t: tape.constant(Tensor::row(&[pose.t.x, pose.t.y, pose.t.z])),
        }
    }

    /// Camera points `[P x 3]` to world: `p R^T + t`.
    pub fn transform_points(&self, tape: &Tape, pts: Var) -> Result<Var> {
        let rt = tape.transpose(self.r);
        tape.add(tape.matmul(pts, rt)?, self.t)
    }

    /// Rotate direction rows `[P x 3]` without translating.
    pub fn rotate_dirs(&self, tape: &Tape, dirs: Var) -> Result<Var> {
        let rt = tape.transpose(self.r);
        tape.matmul(dirs, rt)
    }
}
