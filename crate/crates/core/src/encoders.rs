//! Point encodings: the global One-blob positional encoding and the local
//! hierarchical axis-aligned feature planes.
//!
//! Both encoders normalize world coordinates to `[0, 1]` per axis over the
//! scene bounds first; out-of-bounds points are clamped so tracking stays
//! stable when a pose estimate drifts outside the box.
//!
//! The local representation keeps, per head (geometry / appearance), three
//! axis-aligned planes at a coarse and a fine resolution. A query bilinearly
//! interpolates each plane at the point's projection, sums the three planes
//! per level, and concatenates coarse and fine — giving a 48-d local feature
//! for 24 channels per plane.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Axis-aligned scene box in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Bounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        let e = max - min;
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
            return Err(Error::DegenerateBounds([e.x, e.y, e.z]));
        }
        Ok(Bounds { min, max })
    }

    pub fn min(&self) -> Vector3<f64> {
        self.min
    }

    pub fn max(&self) -> Vector3<f64> {
        self.max
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Normalized coordinates in `[0, 1]`, clamped.
    pub fn normalize(&self, p: Vector3<f64>) -> Vector3<f64> {
        let e = self.extent();
        Vector3::from_fn(|i, _| ((p[i] - self.min[i]) / e[i]).clamp(0.0, 1.0))
    }

    pub fn grown(&self, margin: f64) -> Bounds {
        Bounds {
            min: self.min.add_scalar(-margin),
            max: self.max.add_scalar(margin),
        }
    }
}

/// Map world points `[P x 3]` to clamped `[0, 1]` coordinates on the tape.
pub fn normalize_points(tape: &Tape, bounds: &Bounds, pts_world: Var) -> Result<Var> {
    let e = bounds.extent();
    let inv = tape.constant(Tensor::row(&[1.0 / e.x, 1.0 / e.y, 1.0 / e.z]));
    let mn = bounds.min();
    let off = tape.constant(Tensor::row(&[mn.x / e.x, mn.y / e.y, mn.z / e.z]));
    Ok(tape.clamp01(tape.sub(tape.mul(pts_world, inv)?, off)?))
}

/// Global One-blob encoding of normalized points: `[P x 3] -> [P x 3*bins]`.
pub fn encode_oneblob(tape: &Tape, pts01: Var, bins: usize) -> Result<Var> {
    tape.oneblob(pts01, bins)
}

/// Which two world axes a plane spans (the third is projected out).
const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three axis-aligned feature planes at one resolution.
pub struct PlaneLevel {
    res: f64,
    channels: usize,
    /// (nu, nv) node counts per plane, matching [`PLANE_AXES`] order.
    nodes: [(usize, usize); 3],
    planes: [Param; 3],
}

fn node_count(extent: f64, res: f64) -> usize {
    ((extent / res).ceil() as usize + 1).max(2)
}

impl PlaneLevel {
    pub fn new(bounds: &Bounds, res: f64, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if !(res > 0.0) {
            return Err(Error::InvalidParam(format!(
                "plane resolution must be positive, got {res}"
            )));
        }
        let e = bounds.extent();
        let normal = Normal::new(0.0, 0.01).expect("std is finite");
        let mut nodes = [(0, 0); 3];
        let mut planes = Vec::with_capacity(3);
        for (k, (a, b)) in PLANE_AXES.iter().enumerate() {
            let nu = node_count(e[*a], res);
            let nv = node_count(e[*b], res);
            nodes[k] = (nu, nv);
            planes.push(Param::new(Tensor::from_fn(nu * nv, channels, |_, _| {
                normal.sample(rng)
            })));
        }
        Ok(PlaneLevel {
            res,
            channels,
            nodes,
            planes: planes.try_into().map_err(|_| ()).expect("three planes"),
        })
    }

    pub fn resolution(&self) -> f64 {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn node_counts(&self) -> [(usize, usize); 3] {
        self.nodes
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.planes.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.planes.iter_mut()
    }

    /// Push the three planes onto a tape (trainable or frozen).
    pub fn push(&self, tape: &Tape, frozen: bool) -> [Var; 3] {
        let mut out = [Var(0); 3];
        for (k, p) in self.planes.iter().enumerate() {
            out[k] = if frozen {
                tape.constant(p.value())
            } else {
                p.push(tape)
            };
        }
        out
    }

    /// Sum of the three bilinear plane lookups at normalized points:
    /// `[P x 3] -> [P x channels]`.
    pub fn lookup(&self, tape: &Tape, vars: &[Var; 3], pts01: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (k, (a, b)) in PLANE_AXES.iter().enumerate() {
            let uv = tape.select_cols(pts01, &[*a, *b])?;
            let (nu, nv) = self.nodes[k];
            let f = tape.plane_lookup(vars[k], uv, nu, nv)?;
            acc = Some(match acc {
                None => f,
                Some(s) => tape.add(s, f)?,
            });
        }
        Ok(acc.expect("three planes"))
    }
}

/// Coarse + fine plane hierarchy for one head (geometry or appearance).
pub struct PlanesEncoder {
    pub coarse: PlaneLevel,
    pub fine: PlaneLevel,
}

/// Tape handles for one head's six planes.
pub struct PlanesVars {
    pub coarse: [Var; 3],
    pub fine: [Var; 3],
}

impl PlanesEncoder {
    pub fn new(
        bounds: &Bounds,
        coarse_res: f64,
        fine_res: f64,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(PlanesEncoder {
            coarse: PlaneLevel::new(bounds, coarse_res, channels, rng)?,
            fine: PlaneLevel::new(bounds, fine_res, channels, rng)?,
        })
    }

    pub fn push(&self, tape: &Tape, frozen: bool) -> PlanesVars {
        PlanesVars {
            coarse: self.coarse.push(tape, frozen),
            fine: self.fine.push(tape, frozen),
        }
    }

    /// Local feature: coarse and fine lookups concatenated,
    /// `[P x 3] -> [P x 2*channels]`.
    pub fn encode(&self, tape: &Tape, vars: &PlanesVars, pts01: Var) -> Result<Var> {
        let c = self.coarse.lookup(tape, &vars.coarse, pts01)?;
        let f = self.fine.lookup(tape, &vars.fine, pts01)?;
        tape.concat_cols(c, f)
    }

    pub fn output_dim(&self) -> usize {
        self.coarse.channels() + self.fine.channels()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.coarse.params().chain(self.fine.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.coarse.params_mut().chain(self.fine.params_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_reject_degenerate_boxes() {
        let ok = Bounds::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0));
        assert!(ok.is_ok());
        let bad = Bounds::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 3.0));
        assert!(matches!(bad, Err(Error::DegenerateBounds(_))));
        let inverted = Bounds::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        assert!(inverted.is_err());
    }

    #[test]
    fn normalization_clamps_and_inverts() {
        let b = Bounds::new(Vector3::new(-1.0, 0.0, 2.0), Vector3::new(3.0, 2.0, 4.0)).unwrap();
        let n = b.normalize(Vector3::new(1.0, 1.0, 3.0));
        assert!((n - Vector3::new(0.5, 0.5, 0.5)).norm() < 1e-12);
        let clamped = b.normalize(Vector3::new(-5.0, 9.0, 3.0));
        assert_eq!((clamped.x, clamped.y), (0.0, 1.0));
        assert!((b.diagonal() - (16.0f64 + 4.0 + 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn node_counts_round_up_and_floor_at_two() {
        // 4 m at 24 cm: 16.67 cells -> 17 -> 18 nodes.
        assert_eq!(node_count(4.0, 0.24), 18);
        assert_eq!(node_count(3.0, 0.24), 14);
        // Resolution coarser than the extent still yields a valid 2-node grid.
        assert_eq!(node_count(0.1, 0.24), 2);
    }
}
