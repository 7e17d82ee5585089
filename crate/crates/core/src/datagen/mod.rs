//! Oracle IBVS demonstrations and dataset assembly.
//!
//! Every task (one randomized scene) yields two demonstration segments. In
//! the first the camera leaves the desired pose and servos to a random start
//! pose; in the second it servos back. Each segment is stored as its own
//! demo block whose reference image is the segment's converged final frame,
//! so every recorded command is an IBVS command toward that block's
//! reference.

mod io;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

pub use io::{read_dataset, write_dataset, FORMAT_VERSION, MAGIC};

use crate::config::Config;
use crate::control::{compose_jacobian, interaction_matrix, vs_command, ControlConfig, DepthVector, FeatureVector};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::rng;
use crate::sim::{ground_truth_features, randomize_scene, ImageU8, Rig, Scene, SceneRanges, SimState};

/// One control period of a demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub k: u32,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    /// 6×n robot Jacobian in the end-effector frame.
    pub jr: DMatrix<f64>,
    pub image: ImageU8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Desired pose toward a random start pose.
    Outbound = 0,
    /// Start pose back to the desired pose.
    Return = 1,
}

impl Phase {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Phase::Outbound),
            1 => Ok(Phase::Return),
            _ => Err(Error::Format(format!("unknown phase {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Val = 1,
}

impl Split {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            _ => Err(Error::Format(format!("unknown split {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoMeta {
    /// Task index; both segments of a task share it.
    pub demo_id: u32,
    pub phase: Phase,
    pub scene_seed: u64,
    pub success: bool,
    pub split: Split,
    /// Final frame of the converged segment.
    pub reference: ImageU8,
    /// Ground-truth corner depths at the segment's target pose.
    pub target_depths: DepthVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub meta: DemoMeta,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Joint count.
    pub n: usize,
    /// Feature count.
    pub f: usize,
    pub period: f64,
}

impl DatasetHeader {
    /// Header of datasets collected with `rig`: four tracked box corners.
    pub fn for_rig(rig: &Rig, period: f64) -> Self {
        let k = &rig.intrinsics;
        Self {
            width: k.width,
            height: k.height,
            channels: k.channels,
            n: rig.chain.dof(),
            f: 8,
            period,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub demos: Vec<Demo>,
    /// Tasks whose oracle failed, with the reason; not stored on disk.
    pub discarded: Vec<(u32, String)>,
}

impl Dataset {
    pub fn record_count(&self) -> usize {
        self.demos.iter().map(|d| d.records.len()).sum()
    }

    pub fn partition(&self, split: Split) -> Vec<usize> {
        (0..self.demos.len())
            .filter(|&i| self.demos[i].meta.split == split)
            .collect()
    }

    pub fn task_count(&self, split: Split) -> usize {
        let mut ids: Vec<u32> = self
            .demos
            .iter()
            .filter(|d| d.meta.split == split)
            .map(|d| d.meta.demo_id)
            .collect();
        ids.dedup();
        ids.len()
    }
}

/// Parameters of the demonstrator.
#[derive(Debug, Clone, PartialEq)]
pub struct DatagenConfig {
    pub demos: usize,
    pub split: f64,
    pub seed: u64,
    pub start_translation: [f64; 3],
    pub start_rotation: f64,
    pub phase_timeout: f64,
    pub convergence_tol: f64,
    pub desired_height: f64,
    pub home: DVector<f64>,
    pub control: ControlConfig,
    pub ranges: SceneRanges,
}

impl DatagenConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let t = cfg.floats("data.start_translation");
        Ok(Self {
            demos: cfg.usize("data.demos"),
            split: cfg.f64("data.split"),
            seed: cfg.u64("data.seed"),
            start_translation: [t[0], t[1], t[2]],
            start_rotation: cfg.f64("data.start_rotation_deg").to_radians(),
            phase_timeout: cfg.f64("data.phase_timeout"),
            convergence_tol: cfg.f64("data.convergence_tol"),
            desired_height: cfg.f64("sim.desired_height"),
            home: cfg.initial_posture(),
            control: cfg.control()?,
            ranges: SceneRanges::from_config(cfg),
        })
    }
}

/// A servoed segment plus the ground truth seen along the way.
#[derive(Debug, Clone)]
pub struct Segment {
    pub demo: Demo,
    /// Ground-truth features at every record.
    pub features: Vec<FeatureVector>,
    pub target_features: FeatureVector,
}

/// Both segments of one task.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub scene: Scene,
    pub desired_q: DVector<f64>,
    pub start_pose: Pose,
    pub segments: Vec<Segment>,
}

/// Minimum depth of any tracked corner at a sampled start pose (m).
const START_MIN_DEPTH: f64 = 0.05;
const IK_TOL: f64 = 1e-10;
const IK_ITERS: usize = 500;

/// Runs the oracle IBVS from `q0` until the ground-truth features at the
/// camera pose `target` are reached within `cfg.convergence_tol`, recording
/// every control period. The last record is the converged frame.
pub fn servo_segment(rig: &Rig, scene: &Scene, q0: &DVector<f64>, target: &Pose, cfg: &DatagenConfig) -> Result<Segment> {
    let (s_star, z_star) = ground_truth_features(scene, target, &rig.intrinsics)?;
    let mut state = SimState::new(q0.clone(), scene.clone(), 0);
    let max_steps = (cfg.phase_timeout / cfg.control.period).round() as usize;
    let mut records = Vec::new();
    let mut features = Vec::new();
    for k in 0..=max_steps {
        let q = state.q().clone();
        let (s, _) = rig.features(scene, &q)?;
        let image = ImageU8::from_tensor(&rig.observe(scene, &q)?);
        let jr = rig.chain.robot_jacobian(&q)?;
        let converged = s.max_abs_diff(&s_star) < cfg.convergence_tol;
        let l = interaction_matrix(&s, &z_star)?;
        let j = compose_jacobian(&l, &rig.velocity_transform, &jr)?;
        let qdot = vs_command(&s, &s_star, &j, &cfg.control)?;
        records.push(SampleRecord {
            k: k as u32,
            q: q.clone(),
            qdot: qdot.clone(),
            jr,
            image: image.clone(),
        });
        features.push(s);
        if converged {
            return Ok(Segment {
                demo: Demo {
                    meta: DemoMeta {
                        demo_id: 0,
                        phase: Phase::Return,
                        scene_seed: 0,
                        success: true,
                        split: Split::Train,
                        reference: image,
                        target_depths: z_star,
                    },
                    records,
                },
                features,
                target_features: s_star,
            });
        }
        if k < max_steps {
            state.step(&rig.chain, &qdot, cfg.control.period)?;
        }
    }
    Err(Error::OracleDiverged {
        demo: 0,
        steps: max_steps,
    })
}

/// Samples a start pose around `desired` with every tracked corner in front
/// of the camera.
pub fn sample_start_pose<R: Rng>(rng: &mut R, scene: &Scene, desired: &Pose, cfg: &DatagenConfig) -> Pose {
    let corners = scene.top_corners_world();
    loop {
        let dt = Vector3::from_fn(|i, _| {
            let h = cfg.start_translation[i];
            if h > 0.0 {
                rng.random_range(-h..h)
            } else {
                0.0
            }
        });
        let r = cfg.start_rotation;
        let mut angle = || if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
        let (roll, pitch, yaw) = (angle(), angle(), angle());
        let rot = desired.rotation * UnitQuaternion::from_euler_angles(roll, pitch, yaw);
        let pose = Pose::new(rot, desired.translation + dt);
        let inv = pose.inverse();
        if corners.iter().all(|c| inv.transform_point(c).z > START_MIN_DEPTH) && !scene.contains(&pose.translation) {
            return pose;
        }
    }
}

fn tag(mut seg: Segment, task: u32, phase: Phase, scene_seed: u64, split: Split) -> Segment {
    seg.demo.meta.demo_id = task;
    seg.demo.meta.phase = phase;
    seg.demo.meta.scene_seed = scene_seed;
    seg.demo.meta.split = split;
    seg
}

/// Runs both oracle segments for task `task` of the master `cfg.seed`.
pub fn oracle_demo(rig: &Rig, task: u32, split: Split, cfg: &DatagenConfig) -> Result<OracleRun> {
    let scene_seed = rng::derive(cfg.seed, rng::domain::DEMO, task as u64);
    let scene = randomize_scene(scene_seed, &cfg.ranges);
    let desired = scene.desired_camera_pose(cfg.desired_height);
    let diverged = |e: Error| match e {
        Error::OracleDiverged { steps, .. } => Error::OracleDiverged { demo: task as u64, steps },
        other => other,
    };
    let desired_q = rig
        .chain
        .solve_pose(&rig.flange_for_camera(&desired), &cfg.home, IK_TOL, IK_ITERS)?
        .ok_or(Error::OracleDiverged { demo: task as u64, steps: 0 })?;
    let mut prng = rng::stream(scene_seed, rng::domain::START_POSE, 0);
    let start_pose = sample_start_pose(&mut prng, &scene, &desired, cfg);
    let out = servo_segment(rig, &scene, &desired_q, &start_pose, cfg).map_err(diverged)?;
    let q_start = out.demo.records.last().expect("non-empty segment").q.clone();
    let back = servo_segment(rig, &scene, &q_start, &desired, cfg).map_err(diverged)?;
    Ok(OracleRun {
        segments: vec![
            tag(out, task, Phase::Outbound, scene_seed, split),
            tag(back, task, Phase::Return, scene_seed, split),
        ],
        scene,
        desired_q,
        start_pose,
    })
}

/// Number of training tasks for a split fraction.
pub fn train_task_count(n_tasks: usize, split: f64) -> usize {
    ((split * n_tasks as f64).round() as usize).clamp(1, n_tasks.saturating_sub(1).max(1))
}

/// Runs `cfg.demos` tasks in parallel. Tasks below the training count go to
/// the training partition, the rest to validation (a single task is
/// training-only); failed tasks are recorded in [`Dataset::discarded`].
pub fn build_dataset(rig: &Rig, cfg: &DatagenConfig) -> Result<Dataset> {
    if cfg.demos < 1 {
        return Err(Error::Config("need at least one demonstration".into()));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(Error::Config(format!("split fraction {} not in (0, 1)", cfg.split)));
    }
    let n_train = train_task_count(cfg.demos, cfg.split);
    let runs: Vec<(u32, Result<OracleRun>)> = (0..cfg.demos as u32)
        .into_par_iter()
        .map(|task| {
            let split = if (task as usize) < n_train { Split::Train } else { Split::Val };
            (task, oracle_demo(rig, task, split, cfg))
        })
        .collect();
    let mut demos = Vec::new();
    let mut discarded = Vec::new();
    for (task, run) in runs {
        match run {
            Ok(run) => demos.extend(run.segments.into_iter().map(|s| s.demo)),
            Err(e @ (Error::OracleDiverged { .. } | Error::NonPositiveDepth { .. } | Error::CameraInsideObject)) => {
                discarded.push((task, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Dataset {
        header: DatasetHeader::for_rig(rig, cfg.control.period),
        demos,
        discarded,
    })
}

/// A within-demo pair of consecutive records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub demo: usize,
    /// Index of the first record; the second is `k + 1`.
    pub k: usize,
}

/// All consecutive pairs of the given demos, shuffled with the epoch's
/// stream and packed `batch_size / 2` pairs per batch (the last batch may
/// be short).
pub fn pair_batches(dataset: &Dataset, demos: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<PairRef>>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch size must be even and >= 2, got {batch_size}")));
    }
    let mut pairs: Vec<PairRef> = demos
        .iter()
        .flat_map(|&d| (0..dataset.demos[d].records.len().saturating_sub(1)).map(move |k| PairRef { demo: d, k }))
        .collect();
    pairs.shuffle(&mut rng::stream(seed, rng::domain::SHUFFLE, epoch));
    Ok(pairs.chunks(batch_size / 2).map(|c| c.to_vec()).collect())
}
