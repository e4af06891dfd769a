//! Run configuration: one TOML file describing the dataset, the profile,
//! and any engine overrides.
//!
//! The `[slam]` table is a *partial* override: the chosen profile supplies
//! every default, the user file only lists what differs. Merging happens on
//! raw TOML tables, then the result goes through the strict typed parse, so
//! a misspelled key anywhere — top level, `[slam]`, or nested — is rejected
//! rather than silently ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::SlamConfig;
use crate::error::{Error, Result};
use crate::render::Intrinsics;
use crate::synth::{SensorNoise, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Replica,
    Tum,
    Synthetic,
}

/// Synthetic-stream generation: camera path, length, camera model, sensor
/// corruption.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub trajectory: Trajectory,
    pub frames: usize,
    #[serde(default = "default_synth_intrinsics")]
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub noise: SensorNoise,
    /// Seconds between consecutive frames.
    #[serde(default = "default_time_step")]
    pub time_step: f64,
}

fn default_time_step() -> f64 {
    1.0 / 30.0
}

/// Desk-scale camera: small image, moderate field of view.
pub fn default_synth_intrinsics() -> Intrinsics {
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

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("synthetic stream needs frames >= 1".into()));
        }
        if !(self.time_step > 0.0) {
            return Err(Error::Config("time_step must be positive".into()));
        }
        self.intrinsics.validate()?;
        self.noise.validate()
    }
}

/// Where frames come from: a dataset directory in TUM layout, or a
/// generated synthetic stream. Exactly one must be given.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
}

impl DatasetCfg {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(
                "[dataset] sets both path and synthetic; pick one".into(),
            )),
            (None, None) => Err(Error::Config(
                "[dataset] needs either path or synthetic".into(),
            )),
            _ => {
                if let Some(spec) = &self.synthetic {
                    spec.validate()?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    profile: Profile,
    #[serde(default)]
    seed: u64,
    out: Option<PathBuf>,
    dataset: DatasetCfg,
    /// Partial overrides, merged over the profile defaults before the
    /// strict parse.
    slam: Option<toml::Table>,
}

/// A fully resolved run: everything the pipeline needs, with profile
/// defaults already folded in.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetCfg,
    pub slam: SlamConfig,
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_slam(profile: Profile, over: Option<toml::Table>) -> Result<SlamConfig> {
    let over = over.unwrap_or_default();
    let base = match profile {
        Profile::Synthetic => SlamConfig::synthetic_profile(),
        Profile::Replica | Profile::Tum => {
            // These profiles carry no scene bounds of their own; demand them
            // instead of guessing a room size.
            if !(over.contains_key("bounds_min") && over.contains_key("bounds_max")) {
                return Err(Error::Config(format!(
                    "profile {profile:?} needs [slam] bounds_min and bounds_max"
                )));
            }
            let lo = nalgebra::Vector3::zeros();
            let hi = nalgebra::Vector3::new(1.0, 1.0, 1.0);
            match profile {
                Profile::Replica => SlamConfig::replica_profile(lo, hi),
                _ => SlamConfig::tum_profile(lo, hi),
            }
        }
    };
    let mut table = toml::Table::try_from(&base)
        .map_err(|e| Error::Config(format!("profile defaults do not serialize: {e}")))?;
    deep_merge(&mut table, over);
    let cfg: SlamConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("bad [slam] override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a config string. Unknown keys anywhere are errors.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let raw: RawRunConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    raw.dataset.validate()?;
    let slam = resolve_slam(raw.profile, raw.slam)?;
    Ok(RunConfig {
        profile: raw.profile,
        seed: raw.seed,
        out: raw.out,
        dataset: raw.dataset,
        slam,
    })
}

/// Read and parse a config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_run_config(&text)
}
