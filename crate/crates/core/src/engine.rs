//! Incremental tracking and mapping over an RGB-D stream.
//!
//! The engine alternates two phases built from the same rendering and loss
//! machinery. Tracking freezes the scene field and refines one camera pose
//! through a tangent-space increment; mapping jointly updates the field and
//! the poses of a small keyframe window (the oldest keyframe stays anchored
//! to pin the gauge). Every iteration draws a fresh pixel batch, renders it
//! through the field, and takes one Adam step.
//!
//! An iteration's rays are split into chunks that evaluate on independent
//! tapes, in parallel when the `parallel` feature is active. Per-chunk loss
//! weights are rescaled by ray counts so the summed chunk objective equals
//! the full-batch loss exactly, and gradients are accumulated in chunk
//! order, so results are bit-identical regardless of thread count. All
//! random draws (pixel selection, depth sampling, window selection) happen
//! on the caller's RNG in a fixed serial order for the same reason.

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Bounds;
use crate::error::{Error, Result};
use crate::field::{FieldCfg, SceneField};
use crate::frame::FrameRGBD;
use crate::loss::{loss_terms, LossReport, LossWeights};
use crate::par;
use crate::pose::{retract_on_tape, Pose, PoseVar};
use crate::render::{pixels_to_rays, render_samples, sample_batch, SampleCfg, SampledBatch};
use crate::tensor::{AdamCfg, Param, Tape, Tensor};

/// Everything the pipeline needs besides the stream itself. Profile
/// constructors bundle the published per-dataset settings; the synthetic
/// profile is sized for the desk-scale test room.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlamConfig {
    /// Axis-aligned scene bounds; sample points outside are clamped by the
    /// field's coordinate normalization.
    pub bounds_min: Vector3<f64>,
    pub bounds_max: Vector3<f64>,
    pub field: FieldCfg,
    pub sample: SampleCfg,
    /// Truncation distance `tr` in metres.
    pub truncation: f64,
    pub tracking_iters: usize,
    pub mapping_iters: usize,
    /// Mapping iterations spent on the first frame before tracking starts.
    pub first_frame_iters: usize,
    /// Rays per tracking iteration.
    pub tracking_rays: usize,
    /// Rays per mapping iteration, split evenly across the window.
    pub mapping_rays: usize,
    /// Upper bound on rays per tape; chunks evaluate independently.
    pub chunk_rays: usize,
    pub tracking_weights: LossWeights,
    pub mapping_weights: LossWeights,
    pub tracking_pose_lr: f64,
    pub mapping_pose_lr: f64,
    pub field_lr: f64,
    /// Every `k`-th frame becomes a keyframe and triggers a map step.
    pub keyframe_every: usize,
    /// Mapping window size `W` (current frame, two most recent keyframes,
    /// and random older keyframes).
    pub window: usize,
}

impl SlamConfig {
    /// Desk-scale profile for the synthetic room: small images, short ray
    /// budgets, bounds wrapping the default room with some margin.
    pub fn synthetic_profile() -> Self {
        let bounds_min = Vector3::new(-2.2, -1.7, -0.2);
        let bounds_max = Vector3::new(2.2, 1.7, 2.7);
        SlamConfig {
            bounds_min,
            bounds_max,
            field: FieldCfg::default(),
            sample: SampleCfg {
                n_strat: 32,
                n_imp: 8,
                near: 0.05,
                far: (bounds_max - bounds_min).norm(),
            },
            truncation: 0.06,
            tracking_iters: 25,
            mapping_iters: 15,
            first_frame_iters: 200,
            tracking_rays: 400,
            mapping_rays: 1200,
            chunk_rays: 512,
            tracking_weights: LossWeights::tracking(),
            mapping_weights: LossWeights::mapping(),
            tracking_pose_lr: 2e-3,
            mapping_pose_lr: 1e-3,
            field_lr: 1e-2,
            keyframe_every: 5,
            window: 8,
        }
    }

    /// Published Replica settings: 32 + 8 samples per ray, 2000 tracking
    /// rays for 8 iterations, 4000 mapping rays for 15.
    pub fn replica_profile(bounds_min: Vector3<f64>, bounds_max: Vector3<f64>) -> Self {
        SlamConfig {
            bounds_min,
            bounds_max,
            sample: SampleCfg {
                n_strat: 32,
                n_imp: 8,
                near: 0.05,
                far: (bounds_max - bounds_min).norm(),
            },
            tracking_iters: 8,
            mapping_iters: 15,
            first_frame_iters: 400,
            tracking_rays: 2000,
            mapping_rays: 4000,
            ..Self::synthetic_profile()
        }
    }

    /// Published TUM RGB-D settings: 48 + 8 samples per ray, 30 iterations
    /// for both phases, 2000/4000 rays.
    pub fn tum_profile(bounds_min: Vector3<f64>, bounds_max: Vector3<f64>) -> Self {
        SlamConfig {
            bounds_min,
            bounds_max,
            sample: SampleCfg {
                n_strat: 48,
                n_imp: 8,
                near: 0.05,
                far: (bounds_max - bounds_min).norm(),
            },
            tracking_iters: 30,
            mapping_iters: 30,
            first_frame_iters: 400,
            tracking_rays: 2000,
            mapping_rays: 4000,
            ..Self::synthetic_profile()
        }
    }

    pub fn validate(&self) -> Result<()> {
        Bounds::new(self.bounds_min, self.bounds_max)?;
        self.field.validate()?;
        self.sample.validate()?;
        self.tracking_weights.validate()?;
        self.mapping_weights.validate()?;
        if !(self.truncation > 0.0) {
            return Err(Error::Config("truncation must be positive".into()));
        }
        for (name, v) in [
            ("tracking_rays", self.tracking_rays),
            ("mapping_rays", self.mapping_rays),
            ("chunk_rays", self.chunk_rays),
            ("keyframe_every", self.keyframe_every),
            ("window", self.window),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("tracking_pose_lr", self.tracking_pose_lr),
            ("mapping_pose_lr", self.mapping_pose_lr),
            ("field_lr", self.field_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        Ok(())
    }
}

/// Optimization phase, recorded with every per-iteration report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tracking,
    Mapping,
}

/// One optimizer step's loss breakdown, tagged with where it happened.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterationLog {
    pub frame: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: usize,
    pub pose: Pose,
}

/// Keyframes in insertion order (ids strictly increasing, all multiples of
/// the interval) plus the window-selection rule used by mapping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyframeStore {
    interval: usize,
    window: usize,
    entries: Vec<Keyframe>,
}

impl KeyframeStore {
    pub fn new(interval: usize, window: usize) -> Result<Self> {
        if interval == 0 || window == 0 {
            return Err(Error::Config(
                "keyframe interval and window must be at least 1".into(),
            ));
        }
        Ok(KeyframeStore {
            interval,
            window,
            entries: Vec::new(),
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn entries(&self) -> &[Keyframe] {
        &self.entries
    }

    pub fn is_keyframe_id(&self, frame_id: usize) -> bool {
        frame_id % self.interval == 0
    }

    pub fn insert(&mut self, id: usize, pose: Pose) -> Result<()> {
        if !self.is_keyframe_id(id) {
            return Err(Error::InvalidParam(format!(
                "frame {id} is not a multiple of the keyframe interval {}",
                self.interval
            )));
        }
        if let Some(last) = self.entries.last() {
            if id <= last.id {
                return Err(Error::InvalidParam(format!(
                    "keyframe ids must increase: {id} after {}",
                    last.id
                )));
            }
        }
        self.entries.push(Keyframe { id, pose });
        Ok(())
    }

    pub fn set_pose(&mut self, id: usize, pose: Pose) {
        if let Some(k) = self.entries.iter_mut().find(|k| k.id == id) {
            k.pose = pose;
        }
    }

    /// Frame ids for one mapping window: the current frame, the two most
    /// recent earlier keyframes, and random older ones up to `window` total
    /// (fewer while the list is short). Sorted ascending.
    pub fn select_window(&self, current: usize, rng: &mut impl Rng) -> Vec<usize> {
        let prior: Vec<usize> = self
            .entries
            .iter()
            .map(|k| k.id)
            .filter(|&id| id != current)
            .collect();
        let target = self.window.min(1 + prior.len());
        let recent = prior.len().min(2).min(target.saturating_sub(1));
        let mut chosen = vec![current];
        chosen.extend_from_slice(&prior[prior.len() - recent..]);
        let older = &prior[..prior.len() - recent];
        let extra = target - chosen.len();
        if extra > 0 {
            let picked = index::sample(rng, older.len(), extra);
            chosen.extend(picked.iter().map(|i| older[i]));
        }
        chosen.sort_unstable();
        chosen
    }
}

/// A pose being optimized: fixed base plus an optional tangent increment.
/// `None` means the pose is anchored and stays bit-identical.
struct PoseSlot {
    base: Pose,
    xi: Option<Param>,
}

impl PoseSlot {
    fn free(base: Pose) -> Self {
        PoseSlot {
            base,
            xi: Some(Param::new(Tensor::zeros(1, 6))),
        }
    }

    fn anchored(base: Pose) -> Self {
        PoseSlot { base, xi: None }
    }

    fn current(&self) -> Pose {
        match &self.xi {
            Some(p) => {
                let d = p.value();
                let v = d.data();
                self.base
                    .retract(&[v[0], v[1], v[2], v[3], v[4], v[5]])
            }
            None => self.base,
        }
    }
}

/// One tape's worth of rays: camera-frame directions, targets, and the
/// drawn depth samples. `slot` picks the pose the chunk renders from.
struct ChunkJob {
    slot: usize,
    dirs: Vec<Vector3<f64>>,
    gt_color: Vec<[f64; 3]>,
    gt_depth: Vec<f64>,
    batch: SampledBatch,
}

struct ChunkOut {
    /// Raw per-chunk term means; `total` is already weight-scaled so chunk
    /// totals sum to the full-batch total.
    report: LossReport,
    /// One gradient per field parameter (params order), empty when frozen.
    field_grads: Vec<Option<Vec<f64>>>,
    xi_grad: Option<(usize, Vec<f64>)>,
}

/// Rescale loss weights for a chunk of `mc` rays (`mdc` with depth) out of
/// `m` (`md`): color terms average over rays, depth-supervised terms over
/// measured rays, so scaling by the count fractions makes chunk objectives
/// sum exactly to the full-batch objective.
fn chunk_weights(w: &LossWeights, mc: usize, m: usize, mdc: usize, md: usize) -> LossWeights {
    let sc = mc as f64 / m as f64;
    let sd = if md > 0 { mdc as f64 / md as f64 } else { 0.0 };
    LossWeights {
        rgb: w.rgb * sc,
        depth: w.depth * sd,
        sdf_near: w.sdf_near * sd,
        sdf_far: w.sdf_far * sd,
        free_space: w.free_space * sd,
        info: w.info * sd,
    }
}

fn eval_chunk(
    field: &SceneField,
    frozen: bool,
    slots: &[PoseSlot],
    job: &ChunkJob,
    weights: &LossWeights,
    tr: f64,
    m: usize,
    md: usize,
) -> Result<ChunkOut> {
    let tape = Tape::new();
    let vars = field.push(&tape, frozen);
    let slot = &slots[job.slot];
    let (pose_var, xi_var) = match &slot.xi {
        Some(p) => {
            let xi = p.push(&tape);
            (retract_on_tape(&tape, &slot.base, xi)?, Some(xi))
        }
        None => (PoseVar::constant(&tape, &slot.base), None),
    };

    let rays = job.gt_color.len();
    let per = job.batch.per_ray;
    let cam = Tensor::from_fn(rays * per, 3, |i, k| {
        job.dirs[i / per][k] * job.batch.depths[i]
    });
    let world = pose_var.transform_points(&tape, tape.constant(cam))?;
    let out = field.eval(&tape, &vars, world)?;
    let rendered = render_samples(&tape, out.color, out.sdf, &job.batch.depths, rays, tr)?;
    let terms = loss_terms(
        &tape,
        &rendered,
        out.sdf,
        &job.batch.depths,
        &job.gt_color,
        &job.gt_depth,
        tr,
    )?;
    let scaled = chunk_weights(weights, terms.m, m, terms.m_d, md);
    let (total, report) = terms.total(&tape, &scaled)?;
    let grads = tape.backward(total)?;

    let field_grads = if frozen {
        Vec::new()
    } else {
        SceneField::vars_list(&vars)
            .iter()
            .map(|&v| grads.get(v).map(|g| g.to_vec()))
            .collect()
    };
    let xi_grad = xi_var.and_then(|v| grads.get(v).map(|g| (job.slot, g.to_vec())));
    Ok(ChunkOut {
        report,
        field_grads,
        xi_grad,
    })
}

/// Evaluate every chunk (possibly in parallel) and fail fast on a
/// non-finite batch total before anything touches the parameters.
fn eval_chunks(
    field: &SceneField,
    frozen: bool,
    slots: &[PoseSlot],
    jobs: &[ChunkJob],
    weights: &LossWeights,
    tr: f64,
    phase: &'static str,
    frame: usize,
) -> Result<Vec<ChunkOut>> {
    let m: usize = jobs.iter().map(|j| j.gt_color.len()).sum();
    let md: usize = jobs
        .iter()
        .map(|j| j.gt_depth.iter().filter(|d| d.is_finite()).count())
        .sum();
    let outs: Vec<ChunkOut> = par::map_slice(jobs, |job| {
        eval_chunk(field, frozen, slots, job, weights, tr, m, md)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let total: f64 = outs.iter().map(|o| o.report.total).sum();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            phase,
            frame,
            value: total,
        });
    }
    Ok(outs)
}

/// Merge chunk reports back into the full-batch report (inverse of the
/// weight rescaling; the totals just add).
fn merge_reports(outs: &[ChunkOut]) -> LossReport {
    let m: usize = outs.iter().map(|o| o.report.m).sum();
    let md: usize = outs.iter().map(|o| o.report.m_d).sum();
    let mut rep = LossReport {
        rgb: 0.0,
        depth: 0.0,
        sdf_near: 0.0,
        sdf_far: 0.0,
        free_space: 0.0,
        info: 0.0,
        total: 0.0,
        m,
        m_d: md,
        empty_truncation_rays: 0,
    };
    for o in outs {
        let sc = o.report.m as f64 / m as f64;
        let sd = if md > 0 {
            o.report.m_d as f64 / md as f64
        } else {
            0.0
        };
        rep.rgb += sc * o.report.rgb;
        rep.depth += sd * o.report.depth;
        rep.sdf_near += sd * o.report.sdf_near;
        rep.sdf_far += sd * o.report.sdf_far;
        rep.free_space += sd * o.report.free_space;
        rep.info += sd * o.report.info;
        rep.total += o.report.total;
        rep.empty_truncation_rays += o.report.empty_truncation_rays;
    }
    rep
}

/// Draw a frame's pixel batch from the current pose estimate and split it
/// into chunk jobs. RNG order: one pixel draw, then one depth-sampling pass
/// per chunk, in chunk order.
#[allow(clippy::too_many_arguments)]
fn build_frame_jobs(
    slot: usize,
    frame: &FrameRGBD,
    pose_now: &Pose,
    budget: usize,
    chunk_rays: usize,
    sample: &SampleCfg,
    tr: f64,
    field: &SceneField,
    rng: &mut ChaCha12Rng,
    jobs: &mut Vec<ChunkJob>,
) -> Result<()> {
    let n = frame.intr.pixel_count();
    let take = budget.min(n);
    let mut pixels: Vec<usize> = index::sample(rng, n, take).into_iter().collect();
    pixels.sort_unstable();

    let w = frame.intr.width;
    for lo in (0..take).step_by(chunk_rays.max(1)) {
        let hi = (lo + chunk_rays).min(take);
        let ids = &pixels[lo..hi];
        let coords: Vec<(f64, f64)> = ids
            .iter()
            .map(|&p| ((p % w) as f64, (p / w) as f64))
            .collect();
        let rays = pixels_to_rays(&frame.intr, pose_now, &coords)?;
        let dirs = coords
            .iter()
            .map(|&(u, v)| frame.intr.dir_cam(u, v))
            .collect();
        let gt_color: Vec<[f64; 3]> = ids.iter().map(|&p| frame.color[p]).collect();
        let gt_depth: Vec<f64> = ids.iter().map(|&p| frame.depth[p]).collect();
        let batch = sample_batch(rng, sample, tr, &rays, &gt_depth, field)?;
        jobs.push(ChunkJob {
            slot,
            dirs,
            gt_color,
            gt_depth,
            batch,
        });
    }
    Ok(())
}

/// Refine one camera pose against a frozen field, starting from `prev`.
/// Returns the pose and one loss report per iteration.
pub fn track_frame(
    field: &SceneField,
    frame: &FrameRGBD,
    prev: &Pose,
    cfg: &SlamConfig,
    frame_id: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Pose, Vec<LossReport>)> {
    frame.validate()?;
    let mut slots = [PoseSlot::free(*prev)];
    let adam = AdamCfg::with_lr(cfg.tracking_pose_lr);
    let mut reports = Vec::with_capacity(cfg.tracking_iters);

    for _ in 0..cfg.tracking_iters {
        let pose_now = slots[0].current();
        let mut jobs = Vec::new();
        build_frame_jobs(
            0,
            frame,
            &pose_now,
            cfg.tracking_rays,
            cfg.chunk_rays,
            &cfg.sample,
            cfg.truncation,
            field,
            rng,
            &mut jobs,
        )?;
        let outs = eval_chunks(
            field,
            true,
            &slots,
            &jobs,
            &cfg.tracking_weights,
            cfg.truncation,
            "tracking",
            frame_id,
        )?;

        let xi = slots[0].xi.as_mut().expect("tracking pose is free");
        xi.zero_grad();
        for o in &outs {
            if let Some((_, g)) = &o.xi_grad {
                xi.accumulate(g)?;
            }
        }
        xi.adam_step(&adam)?;
        reports.push(merge_reports(&outs));
    }
    Ok((slots[0].current().orthonormalized(), reports))
}

/// One frame of a mapping window. `anchored` freezes the pose (used for the
/// first keyframe so the gauge cannot drift).
pub struct WindowFrame<'a> {
    pub id: usize,
    pub frame: &'a FrameRGBD,
    pub pose: Pose,
    pub anchored: bool,
}

/// Jointly optimize the field and the window poses for `iters` steps. The
/// ray budget is split evenly across the window; refined poses are written
/// back into `window` (anchored ones are left untouched, bit for bit).
pub fn map_step(
    field: &mut SceneField,
    window: &mut [WindowFrame<'_>],
    cfg: &SlamConfig,
    iters: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<LossReport>> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    for wf in window.iter() {
        wf.frame.validate()?;
    }
    let newest = window.iter().map(|w| w.id).max().unwrap_or(0);
    let budget = (cfg.mapping_rays / window.len()).max(1);

    let mut slots: Vec<PoseSlot> = window
        .iter()
        .map(|wf| {
            if wf.anchored {
                PoseSlot::anchored(wf.pose)
            } else {
                PoseSlot::free(wf.pose)
            }
        })
        .collect();
    let field_adam = AdamCfg::with_lr(cfg.field_lr);
    let pose_adam = AdamCfg::with_lr(cfg.mapping_pose_lr);
    let mut reports = Vec::with_capacity(iters);

    for _ in 0..iters {
        let mut jobs = Vec::new();
        for (si, wf) in window.iter().enumerate() {
            let pose_now = slots[si].current();
            build_frame_jobs(
                si,
                wf.frame,
                &pose_now,
                budget,
                cfg.chunk_rays,
                &cfg.sample,
                cfg.truncation,
                field,
                rng,
                &mut jobs,
            )?;
        }
        let outs = eval_chunks(
            field,
            false,
            &slots,
            &jobs,
            &cfg.mapping_weights,
            cfg.truncation,
            "mapping",
            newest,
        )?;

        let mut params = field.params_mut();
        for p in params.iter_mut() {
            p.zero_grad();
        }
        for o in &outs {
            for (p, g) in params.iter_mut().zip(&o.field_grads) {
                if let Some(g) = g {
                    p.accumulate(g)?;
                }
            }
        }
        for p in params.iter_mut() {
            p.adam_step(&field_adam)?;
        }

        for s in slots.iter_mut() {
            if let Some(xi) = s.xi.as_mut() {
                xi.zero_grad();
            }
        }
        for o in &outs {
            if let Some((si, g)) = &o.xi_grad {
                if let Some(xi) = slots[*si].xi.as_mut() {
                    xi.accumulate(g)?;
                }
            }
        }
        for s in slots.iter_mut() {
            if let Some(xi) = s.xi.as_mut() {
                xi.adam_step(&pose_adam)?;
            }
        }
        reports.push(merge_reports(&outs));
    }

    for (wf, slot) in window.iter_mut().zip(&slots) {
        if !wf.anchored {
            wf.pose = slot.current().orthonormalized();
        }
    }
    Ok(reports)
}

/// Full run artifacts: one pose per input frame, the trained field, the
/// keyframe list, and every per-iteration loss report.
pub struct SlamOutput {
    pub trajectory: Vec<Pose>,
    pub field: SceneField,
    pub keyframes: KeyframeStore,
    pub logs: Vec<IterationLog>,
}

/// Incremental pipeline state: the trained-so-far field, the trajectory, and
/// the generator position. Frames are consumed one at a time with
/// [`SlamSession::advance`], so a run can be checkpointed between frames and
/// resumed with the identical random stream.
pub struct SlamSession {
    cfg: SlamConfig,
    field: SceneField,
    trajectory: Vec<Pose>,
    keyframes: KeyframeStore,
    logs: Vec<IterationLog>,
    rng: ChaCha12Rng,
    initial: Pose,
    next: usize,
}

impl SlamSession {
    /// Seed the generator and initialize the field. No frame is consumed
    /// yet; the first [`SlamSession::advance`] anchors frame 0 at `initial`
    /// (identity if absent).
    pub fn new(cfg: &SlamConfig, seed: u64, initial: Option<Pose>) -> Result<SlamSession> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let bounds = Bounds::new(cfg.bounds_min, cfg.bounds_max)?;
        let field = SceneField::new(bounds, cfg.field.clone(), &mut rng)?;
        let keyframes = KeyframeStore::new(cfg.keyframe_every, cfg.window)?;
        Ok(SlamSession {
            cfg: cfg.clone(),
            field,
            trajectory: Vec::new(),
            keyframes,
            logs: Vec::new(),
            rng,
            initial: initial.unwrap_or_else(Pose::identity),
            next: 0,
        })
    }

    pub fn config(&self) -> &SlamConfig {
        &self.cfg
    }

    pub fn field(&self) -> &SceneField {
        &self.field
    }

    pub fn trajectory(&self) -> &[Pose] {
        &self.trajectory
    }

    pub fn keyframes(&self) -> &KeyframeStore {
        &self.keyframes
    }

    pub fn logs(&self) -> &[IterationLog] {
        &self.logs
    }

    /// Index of the next frame [`SlamSession::advance`] will consume.
    pub fn frames_done(&self) -> usize {
        self.next
    }

    /// Process the next frame of `frames`: anchor-and-map for frame 0,
    /// track (plus a windowed mapping step on keyframes) afterwards. The
    /// full slice is needed because mapping windows revisit earlier
    /// keyframes. Returns `false` without consuming randomness once the
    /// stream is exhausted.
    pub fn advance(&mut self, frames: &[FrameRGBD]) -> Result<bool> {
        let t = self.next;
        if t >= frames.len() {
            return Ok(false);
        }
        if t == 0 {
            let first = self.initial;
            self.trajectory.push(first);
            self.keyframes.insert(0, first)?;
            let mut window = [WindowFrame {
                id: 0,
                frame: &frames[0],
                pose: first,
                anchored: true,
            }];
            let reports = map_step(
                &mut self.field,
                &mut window,
                &self.cfg,
                self.cfg.first_frame_iters,
                &mut self.rng,
            )?;
            log_phase(&mut self.logs, 0, Phase::Mapping, reports);
            self.next = 1;
            return Ok(true);
        }

        let prev = self.trajectory[t - 1];
        let (pose, reports) =
            track_frame(&self.field, &frames[t], &prev, &self.cfg, t, &mut self.rng)?;
        self.trajectory.push(pose);
        log_phase(&mut self.logs, t, Phase::Tracking, reports);

        if self.keyframes.is_keyframe_id(t) {
            self.keyframes.insert(t, pose)?;
            let ids = self.keyframes.select_window(t, &mut self.rng);
            let mut window: Vec<WindowFrame> = ids
                .iter()
                .map(|&id| WindowFrame {
                    id,
                    frame: &frames[id],
                    pose: self.trajectory[id],
                    anchored: id == 0,
                })
                .collect();
            let reports = map_step(
                &mut self.field,
                &mut window,
                &self.cfg,
                self.cfg.mapping_iters,
                &mut self.rng,
            )?;
            log_phase(&mut self.logs, t, Phase::Mapping, reports);
            for wf in &window {
                self.trajectory[wf.id] = wf.pose;
                self.keyframes.set_pose(wf.id, wf.pose);
            }
        }
        self.next = t + 1;
        Ok(true)
    }

    pub fn into_output(self) -> SlamOutput {
        SlamOutput {
            trajectory: self.trajectory,
            field: self.field,
            keyframes: self.keyframes,
            logs: self.logs,
        }
    }

    /// Raw state for checkpoint serialization.
    pub(crate) fn parts(
        &self,
    ) -> (
        &SlamConfig,
        &SceneField,
        &[Pose],
        &KeyframeStore,
        &[IterationLog],
        &ChaCha12Rng,
        Pose,
        usize,
    ) {
        (
            &self.cfg,
            &self.field,
            &self.trajectory,
            &self.keyframes,
            &self.logs,
            &self.rng,
            self.initial,
            self.next,
        )
    }

    /// Rebuild a session from checkpoint state. The caller is responsible
    /// for internal consistency (shapes already validated by the field
    /// restore path).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        cfg: SlamConfig,
        field: SceneField,
        trajectory: Vec<Pose>,
        keyframes: KeyframeStore,
        logs: Vec<IterationLog>,
        rng: ChaCha12Rng,
        initial: Pose,
        next: usize,
    ) -> SlamSession {
        SlamSession {
            cfg,
            field,
            trajectory,
            keyframes,
            logs,
            rng,
            initial,
            next,
        }
    }
}

/// Run the full pipeline over a stream. Frame 0 initializes the field with
/// its pose anchored at `initial` (identity if absent); each later frame is
/// tracked from its predecessor, and every `keyframe_every`-th frame joins
/// the keyframe list and triggers a mapping step over a window.
pub fn run_slam(
    frames: &[FrameRGBD],
    cfg: &SlamConfig,
    seed: u64,
    initial: Option<Pose>,
) -> Result<SlamOutput> {
    if frames.is_empty() {
        return Err(Error::Dataset("the stream has no frames".into()));
    }
    let mut session = SlamSession::new(cfg, seed, initial)?;
    while session.advance(frames)? {}
    Ok(session.into_output())
}

fn log_phase(logs: &mut Vec<IterationLog>, frame: usize, phase: Phase, reports: Vec<LossReport>) {
    for (i, report) in reports.into_iter().enumerate() {
        logs.push(IterationLog {
            frame,
            phase,
            iteration: i,
            report,
        });
    }
}
