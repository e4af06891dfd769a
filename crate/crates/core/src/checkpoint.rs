//! Binary checkpoints for interrupting and resuming a run between frames.
//!
//! A checkpoint freezes everything [`SlamSession`] owns: the config, every
//! field parameter with its optimizer moments, the trajectory, keyframes,
//! iteration logs, and the exact generator position (seed plus word offset).
//! Restoring and continuing therefore replays the identical random stream,
//! so an interrupted run finishes bit-for-bit equal to an uninterrupted one.
//! The caller re-supplies the same frame stream on resume; frames are *not*
//! stored.
//!
//! Layout: little-endian, a magic/version header, the config as a
//! length-prefixed JSON blob (self-describing, survives field reordering),
//! then raw f64 bits for all numeric state. Floats round-trip exactly,
//! including NaN payloads.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::encoders::Bounds;
use crate::engine::{IterationLog, KeyframeStore, Phase, SlamConfig, SlamSession};
use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::loss::LossReport;
use crate::pose::Pose;

const MAGIC: &[u8; 4] = b"LGSC";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)
        .map_err(|e| bad(format!("truncated float block: {e}")))?;
    Ok(out)
}

fn write_pose<W: Write>(w: &mut W, pose: &Pose) -> Result<()> {
    write_f64s(w, pose.rotation().as_slice())?;
    write_f64s(w, pose.translation().as_slice())
}

fn read_pose<R: Read>(r: &mut R) -> Result<Pose> {
    let rot = read_f64s(r, 9)?;
    let t = read_f64s(r, 3)?;
    Pose::new(
        Matrix3::from_column_slice(&rot),
        Vector3::new(t[0], t[1], t[2]),
    )
}

fn write_usize<W: Write>(w: &mut W, n: usize) -> Result<()> {
    w.write_u64::<LittleEndian>(n as u64)?;
    Ok(())
}

fn read_usize<R: Read>(r: &mut R) -> Result<usize> {
    let n = r
        .read_u64::<LittleEndian>()
        .map_err(|e| bad(format!("truncated length field: {e}")))?;
    usize::try_from(n).map_err(|_| bad(format!("length {n} does not fit in usize")))
}

fn write_session<W: Write>(session: &SlamSession, w: &mut W) -> Result<()> {
    let (cfg, field, trajectory, keyframes, logs, rng, initial, next) = session.parts();

    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;

    let cfg_json = serde_json::to_vec(cfg)
        .map_err(|e| bad(format!("config does not serialize: {e}")))?;
    write_usize(w, cfg_json.len())?;
    w.write_all(&cfg_json)?;

    let params = field.params();
    write_usize(w, params.len())?;
    for p in params {
        let (value, m, v, t) = p.state();
        let (rows, cols) = p.shape();
        write_usize(w, rows)?;
        write_usize(w, cols)?;
        write_f64s(w, value)?;
        write_f64s(w, m)?;
        write_f64s(w, v)?;
        w.write_u64::<LittleEndian>(t)?;
    }

    write_usize(w, trajectory.len())?;
    for pose in trajectory {
        write_pose(w, pose)?;
    }

    write_usize(w, keyframes.interval())?;
    write_usize(w, keyframes.window())?;
    write_usize(w, keyframes.entries().len())?;
    for kf in keyframes.entries() {
        write_usize(w, kf.id)?;
        write_pose(w, &kf.pose)?;
    }

    write_usize(w, logs.len())?;
    for log in logs {
        write_usize(w, log.frame)?;
        w.write_u8(match log.phase {
            Phase::Tracking => 0,
            Phase::Mapping => 1,
        })?;
        write_usize(w, log.iteration)?;
        let r = &log.report;
        write_f64s(
            w,
            &[
                r.rgb,
                r.depth,
                r.sdf_near,
                r.sdf_far,
                r.free_space,
                r.info,
                r.total,
            ],
        )?;
        write_usize(w, r.m)?;
        write_usize(w, r.m_d)?;
        write_usize(w, r.empty_truncation_rays)?;
    }

    w.write_all(&rng.get_seed())?;
    w.write_u128::<LittleEndian>(rng.get_word_pos())?;
    write_pose(w, &initial)?;
    write_usize(w, next)?;
    Ok(())
}

fn read_session<R: Read>(r: &mut R) -> Result<SlamSession> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("missing header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| bad(format!("missing version: {e}")))?;
    if version != VERSION {
        return Err(bad(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }

    let cfg_len = read_usize(r)?;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json)
        .map_err(|e| bad(format!("truncated config blob: {e}")))?;
    let cfg: SlamConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| bad(format!("config does not parse: {e}")))?;
    cfg.validate()?;

    // Rebuild the field with a throwaway generator, then overwrite every
    // parameter and its optimizer state with the stored bits.
    let bounds = Bounds::new(cfg.bounds_min, cfg.bounds_max)?;
    let mut init_rng = ChaCha12Rng::seed_from_u64(0);
    let mut field = SceneField::new(bounds, cfg.field.clone(), &mut init_rng)?;

    let n_params = read_usize(r)?;
    {
        let mut params = field.params_mut();
        if n_params != params.len() {
            return Err(bad(format!(
                "checkpoint stores {n_params} parameter tensors, config builds {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let rows = read_usize(r)?;
            let cols = read_usize(r)?;
            if (rows, cols) != p.shape() {
                return Err(bad(format!(
                    "parameter shape {rows}x{cols} does not match {}x{}",
                    p.shape().0,
                    p.shape().1
                )));
            }
            let len = rows * cols;
            let value = read_f64s(r, len)?;
            let m = read_f64s(r, len)?;
            let v = read_f64s(r, len)?;
            let t = r
                .read_u64::<LittleEndian>()
                .map_err(|e| bad(format!("truncated step counter: {e}")))?;
            p.restore(&value, &m, &v, t)?;
        }
    }

    let n_poses = read_usize(r)?;
    let mut trajectory = Vec::with_capacity(n_poses.min(1 << 20));
    for _ in 0..n_poses {
        trajectory.push(read_pose(r)?);
    }

    let interval = read_usize(r)?;
    let window = read_usize(r)?;
    let mut keyframes = KeyframeStore::new(interval, window)?;
    let n_kf = read_usize(r)?;
    for _ in 0..n_kf {
        let id = read_usize(r)?;
        let pose = read_pose(r)?;
        keyframes.insert(id, pose)?;
    }

    let n_logs = read_usize(r)?;
    let mut logs = Vec::with_capacity(n_logs.min(1 << 20));
    for _ in 0..n_logs {
        let frame = read_usize(r)?;
        let phase = match r.read_u8().map_err(|e| bad(format!("truncated phase: {e}")))? {
            0 => Phase::Tracking,
            1 => Phase::Mapping,
            other => return Err(bad(format!("unknown phase tag {other}"))),
        };
        let iteration = read_usize(r)?;
        let f = read_f64s(r, 7)?;
        let m = read_usize(r)?;
        let m_d = read_usize(r)?;
        let empty_truncation_rays = read_usize(r)?;
        logs.push(IterationLog {
            frame,
            phase,
            iteration,
            report: LossReport {
                rgb: f[0],
                depth: f[1],
                sdf_near: f[2],
                sdf_far: f[3],
                free_space: f[4],
                info: f[5],
                total: f[6],
                m,
                m_d,
                empty_truncation_rays,
            },
        });
    }

    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)
        .map_err(|e| bad(format!("truncated generator seed: {e}")))?;
    let word_pos = r
        .read_u128::<LittleEndian>()
        .map_err(|e| bad(format!("truncated generator position: {e}")))?;
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let initial = read_pose(r)?;
    let next = read_usize(r)?;
    if next > trajectory.len() {
        return Err(bad(format!(
            "next frame {next} exceeds the {} stored poses",
            trajectory.len()
        )));
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after checkpoint payload"));
    }

    Ok(SlamSession::from_parts(
        cfg, field, trajectory, keyframes, logs, rng, initial, next,
    ))
}

/// Write the session to `path`, replacing any existing file.
pub fn save_checkpoint(session: &SlamSession, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_session(session, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a session saved by [`save_checkpoint`]. Fails on anything
/// malformed: wrong magic or version, shapes that disagree with the embedded
/// config, truncation, or trailing bytes.
pub fn load_checkpoint(path: &Path) -> Result<SlamSession> {
    let bytes = std::fs::read(path)?;
    read_session(&mut bytes.as_slice())
}
