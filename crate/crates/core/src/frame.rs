//! RGB-D frames, the unit of input consumed by tracking and mapping.

use crate::render::{depth_valid, Intrinsics};
use crate::{Error, Result};

/// One RGB-D observation.
///
/// Depth is stored in meters along the unit pixel ray. Holes are NaN, so an
/// unmeasured pixel can never be confused with a measurement of zero; use
/// [`depth_valid`] (finite and strictly positive) to test entries.
#[derive(Clone, Debug)]
pub struct FrameRGBD {
    pub intr: Intrinsics,
    /// Row-major `width * height` linear RGB in [0, 1].
    pub color: Vec<[f64; 3]>,
    /// Row-major `width * height` meters; invalid entries are NaN.
    pub depth: Vec<f64>,
    /// Seconds.
    pub timestamp: f64,
}

impl FrameRGBD {
    pub fn validate(&self) -> Result<()> {
        self.intr.validate()?;
        let n = self.intr.pixel_count();
        if self.color.len() != n || self.depth.len() != n {
            return Err(Error::InvalidParam(format!(
                "frame buffers ({} color, {} depth) do not match {}x{} intrinsics",
                self.color.len(),
                self.depth.len(),
                self.intr.width,
                self.intr.height
            )));
        }
        Ok(())
    }

    /// Number of pixels carrying a usable depth measurement.
    pub fn measured_count(&self) -> usize {
        self.depth.iter().filter(|&&d| depth_valid(d)).count()
    }

    /// Per-pixel measurement mask.
    pub fn depth_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| depth_valid(d)).collect()
    }
}
