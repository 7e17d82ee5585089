//! Closed-loop episodes, control metrics and benchmark tables.
//!
//! An episode randomizes a scene, captures the reference image and target
//! depths at the desired camera pose, puts the robot at the fixed initial
//! posture and servos until both pose errors fall below their thresholds or
//! the time budget runs out.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::Config;
use crate::control::{compose_jacobian, interaction_matrix, nullspace_command, vs_command, ControlConfig, DepthVector, FeatureVector};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{quat_distance, Pose};
use crate::nn::ModelWeights;
use crate::rng;
use crate::sim::{camera_twist_jacobian, ground_truth_features, randomize_scene, render, ImageTensor, Rig, Scene, SceneRanges, SimState};
use crate::training::{train, LossWeights, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub duration: f64,
    pub pe_threshold: f64,
    pub oe_threshold: f64,
    pub stop_at_convergence: bool,
    pub desired_height: f64,
    pub initial_posture: DVector<f64>,
    pub control: ControlConfig,
    pub ranges: SceneRanges,
}

impl EpisodeConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let ec = Self {
            duration: cfg.f64("eval.duration"),
            pe_threshold: cfg.f64("eval.pe_threshold"),
            oe_threshold: cfg.f64("eval.oe_threshold"),
            stop_at_convergence: cfg.bool("eval.stop_at_convergence"),
            desired_height: cfg.f64("sim.desired_height"),
            initial_posture: cfg.initial_posture(),
            control: cfg.control()?,
            ranges: SceneRanges::from_config(cfg),
        };
        ec.validate()?;
        Ok(ec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pe_threshold > 0.0 && self.oe_threshold > 0.0) {
            return Err(Error::Config("success thresholds must be > 0".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("episode duration must be > 0".into()));
        }
        self.control.validate()
    }

    pub fn max_steps(&self) -> usize {
        (self.duration / self.control.period).round() as usize
    }
}

/// How the VS law uses the predicted features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// Full 6-DoF law.
    Vs,
    /// Feature regulation inside the null space of a fixed camera orientation.
    Nullspace,
}

impl ControlMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMode::Vs => "vs",
            ControlMode::Nullspace => "nullspace",
        }
    }
}

impl std::str::FromStr for ControlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vs" => Ok(ControlMode::Vs),
            "nullspace" => Ok(ControlMode::Nullspace),
            _ => Err(Error::Config(format!("unknown controller '{s}' (vs, nullspace)"))),
        }
    }
}

/// Source of the commands of an episode.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// IBVS on ground-truth features.
    Oracle(ControlMode),
    /// IBVS on features predicted by a perception model.
    Neural(&'a ModelWeights<f32>, ControlMode),
    /// Joint velocities regressed from image and joint positions.
    EndToEnd(&'a ModelWeights<f32>),
}

/// Everything recorded during one episode. Row `k` of the pose traces is
/// the state observed at step `k`; `commands[k]` is the command issued
/// there, so the pose traces are one longer than the command trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub scene_seed: u64,
    pub success: bool,
    /// Step at which both thresholds were first met.
    pub converged_at: Option<usize>,
    pub commands: Vec<DVector<f64>>,
    pub camera_poses: Vec<Pose>,
    pub pe: Vec<f64>,
    pub oe: Vec<f64>,
    /// Camera angular speed produced by each command (rad/s).
    pub angular_speed: Vec<f64>,
    /// Simulator or controller error that ended the episode.
    pub failure: Option<String>,
}

/// Per-step and per-episode control metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    /// `‖q̇_k‖`.
    pub ce: Vec<f64>,
    /// `‖q̇_k − q̇_{k−1}‖ / T`, the robot starting at rest.
    pub cs: Vec<f64>,
    pub ce_mean: f64,
    pub cs_mean: f64,
    pub ce_median: f64,
    pub cs_median: f64,
    pub final_pe: f64,
    pub final_oe: f64,
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile; NaN for an empty slice.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Control metrics of a trace.
pub fn metrics(report: &RolloutReport, period: f64) -> Result<EpisodeMetrics> {
    if report.commands.len() < 2 {
        return Err(Error::TooShortTrace {
            len: report.commands.len(),
            needed: 2,
        });
    }
    let ce: Vec<f64> = report.commands.iter().map(|c| c.norm()).collect();
    let mut cs = Vec::with_capacity(ce.len());
    let mut prev = DVector::zeros(report.commands[0].len());
    for c in &report.commands {
        cs.push((c - &prev).norm() / period);
        prev = c.clone();
    }
    Ok(EpisodeMetrics {
        ce_mean: mean(&ce),
        cs_mean: mean(&cs),
        ce_median: median(&ce),
        cs_median: median(&cs),
        final_pe: *report.pe.last().expect("non-empty trace"),
        final_oe: *report.oe.last().expect("non-empty trace"),
        ce,
        cs,
    })
}

/// Whether some observed step of the trace meets both thresholds.
pub fn trace_success(report: &RolloutReport, pe_threshold: f64, oe_threshold: f64) -> bool {
    report.pe.iter().zip(&report.oe).any(|(p, o)| *p < pe_threshold && *o < oe_threshold)
}

pub fn pose_errors(camera: &Pose, desired: &Pose) -> Result<(f64, f64)> {
    let pe = (camera.translation - desired.translation).norm();
    let oe = quat_distance(camera.rotation.quaternion(), desired.rotation.quaternion())?;
    Ok((pe, oe))
}

/// The task of an episode: scene, desired pose, reference image and the
/// ground truth observed there.
#[derive(Debug, Clone)]
pub struct EpisodeTask {
    pub scene: Scene,
    pub scene_seed: u64,
    pub desired: Pose,
    pub reference: ImageTensor,
    pub target_features: FeatureVector,
    pub target_depths: DepthVector,
}

pub fn episode_seed(master: u64, episode: usize) -> u64 {
    rng::derive(master, rng::domain::EPISODE, episode as u64)
}

pub fn episode_task(rig: &Rig, scene_seed: u64, ec: &EpisodeConfig) -> Result<EpisodeTask> {
    let scene = randomize_scene(scene_seed, &ec.ranges);
    let desired = scene.desired_camera_pose(ec.desired_height);
    let reference = render(&scene, &desired, &rig.intrinsics)?.quantized();
    let (target_features, target_depths) = ground_truth_features(&scene, &desired, &rig.intrinsics)?;
    Ok(EpisodeTask {
        scene,
        scene_seed,
        desired,
        reference,
        target_features,
        target_depths,
    })
}

/// Per-episode state of a controller: the reference prediction is computed
/// once, at the desired pose.
struct Policy<'a> {
    controller: Controller<'a>,
    reference: Option<FeatureVector>,
}

impl<'a> Policy<'a> {
    fn new(controller: Controller<'a>, task: &EpisodeTask) -> Result<Self> {
        let reference = match controller {
            Controller::Oracle(_) => Some(task.target_features.clone()),
            Controller::Neural(w, _) => Some(w.features(&task.reference)?),
            Controller::EndToEnd(_) => None,
        };
        Ok(Self { controller, reference })
    }

    fn command(&self, rig: &Rig, task: &EpisodeTask, q: &DVector<f64>, ec: &EpisodeConfig) -> Result<DVector<f64>> {
        let vs = |s: &FeatureVector, mode: ControlMode| -> Result<DVector<f64>> {
            let s_star = self.reference.as_ref().expect("reference features");
            let jr = rig.chain.robot_jacobian(q)?;
            let l = interaction_matrix(s, &task.target_depths)?;
            let j = compose_jacobian(&l, &rig.velocity_transform, &jr)?;
            match mode {
                ControlMode::Vs => vs_command(s, s_star, &j, &ec.control),
                ControlMode::Nullspace => {
                    let jc = camera_twist_jacobian(rig, q)?;
                    nullspace_command(s, s_star, &j, &jc.rows(3, 3).into_owned(), &ec.control)
                }
            }
        };
        match self.controller {
            Controller::Oracle(mode) => {
                let (s, _) = rig.features(&task.scene, q)?;
                vs(&s, mode)
            }
            Controller::Neural(w, mode) => vs(&w.features(&rig.observe(&task.scene, q)?)?, mode),
            Controller::EndToEnd(w) => {
                let c = ec.control.clamp;
                Ok(w.e2e_forward(&rig.observe(&task.scene, q)?, q)?.map(|v| v.clamp(-c, c)))
            }
        }
    }
}

/// Runs one episode. Simulator and controller errors end the episode and
/// are recorded as a failure instead of being returned.
pub fn rollout(rig: &Rig, controller: Controller<'_>, scene_seed: u64, ec: &EpisodeConfig) -> Result<RolloutReport> {
    ec.validate()?;
    let mut report = RolloutReport {
        scene_seed,
        success: false,
        converged_at: None,
        commands: Vec::new(),
        camera_poses: Vec::new(),
        pe: Vec::new(),
        oe: Vec::new(),
        angular_speed: Vec::new(),
        failure: None,
    };
    let task = match episode_task(rig, scene_seed, ec) {
        Ok(t) => t,
        Err(e) => {
            report.failure = Some(e.to_string());
            return Ok(report);
        }
    };
    let policy = match Policy::new(controller, &task) {
        Ok(p) => p,
        Err(e) => {
            report.failure = Some(e.to_string());
            return Ok(report);
        }
    };
    let mut state = SimState::new(ec.initial_posture.clone(), task.scene.clone(), scene_seed);
    let max_steps = ec.max_steps();
    let outcome = (|| -> Result<()> {
        for k in 0..=max_steps {
            let q = state.q().clone();
            let pose = rig.camera_pose(&q)?;
            let (pe, oe) = pose_errors(&pose, &task.desired)?;
            report.camera_poses.push(pose);
            report.pe.push(pe);
            report.oe.push(oe);
            if pe < ec.pe_threshold && oe < ec.oe_threshold && report.converged_at.is_none() {
                report.converged_at = Some(k);
                report.success = true;
                if ec.stop_at_convergence {
                    return Ok(());
                }
            }
            if k == max_steps {
                return Ok(());
            }
            let qdot = policy.command(rig, &task, &q, ec)?;
            let omega = camera_twist_jacobian(rig, &q)?.rows(3, 3) * &qdot;
            report.angular_speed.push(omega.norm());
            report.commands.push(qdot.clone());
            state.step(&rig.chain, &qdot, ec.control.period)?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        report.failure = Some(e.to_string());
    }
    Ok(report)
}

/// One row of a comparison table. Metric columns are medians over the
/// successful episodes; `*_mean` columns aggregate per-episode means and
/// `*_step` columns per-episode medians of the per-step values.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub name: String,
    pub episodes: usize,
    pub successes: usize,
    pub ce_mean: f64,
    pub cs_mean: f64,
    pub ce_step: f64,
    pub cs_step: f64,
    pub pe: f64,
    pub oe: f64,
    pub max_angular_speed: f64,
}

impl BenchmarkRow {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }
}

pub fn summarize(name: &str, reports: &[RolloutReport], period: f64) -> BenchmarkRow {
    let ok: Vec<EpisodeMetrics> = reports.iter().filter(|r| r.success).filter_map(|r| metrics(r, period).ok()).collect();
    let col = |f: &dyn Fn(&EpisodeMetrics) -> f64| median(&ok.iter().map(f).collect::<Vec<_>>());
    // Episodes converged before the first command have no metrics but count
    // as successes.
    let pe_all: Vec<f64> = reports.iter().filter(|r| r.success).map(|r| *r.pe.last().unwrap_or(&f64::NAN)).collect();
    let oe_all: Vec<f64> = reports.iter().filter(|r| r.success).map(|r| *r.oe.last().unwrap_or(&f64::NAN)).collect();
    BenchmarkRow {
        name: name.to_string(),
        episodes: reports.len(),
        successes: reports.iter().filter(|r| r.success).count(),
        ce_mean: col(&|m| m.ce_mean),
        cs_mean: col(&|m| m.cs_mean),
        ce_step: col(&|m| m.ce_median),
        cs_step: col(&|m| m.cs_median),
        pe: median(&pe_all),
        oe: median(&oe_all),
        max_angular_speed: reports.iter().flat_map(|r| r.angular_speed.iter().copied()).fold(0.0, f64::max),
    }
}

/// Runs `episodes` matched-seed episodes in parallel.
pub fn run_episodes(rig: &Rig, controller: Controller<'_>, episodes: usize, master_seed: u64, ec: &EpisodeConfig) -> Result<Vec<RolloutReport>> {
    (0..episodes)
        .into_par_iter()
        .map(|e| rollout(rig, controller, episode_seed(master_seed, e), ec))
        .collect()
}

/// Rollouts and summary row of every named controller on the same seeds.
pub fn benchmark(
    rig: &Rig,
    controllers: &[(String, Controller<'_>)],
    episodes: usize,
    master_seed: u64,
    ec: &EpisodeConfig,
) -> Result<Vec<(BenchmarkRow, Vec<RolloutReport>)>> {
    controllers
        .iter()
        .map(|(name, c)| {
            let reports = run_episodes(rig, *c, episodes, master_seed, ec)?;
            Ok((summarize(name, &reports, ec.control.period), reports))
        })
        .collect()
}

fn fmt(v: f64) -> String {
    fmt_prec(v, 6)
}

fn fmt_prec(v: f64, digits: usize) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.digits$}")
    }
}

/// Comparison table as comma-separated text.
pub fn summary_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("name,episodes,successes,sr,ce,cs,pe,oe,ce_step,cs_step,max_angular_speed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.3e}",
            r.name,
            r.episodes,
            r.successes,
            fmt(r.success_rate()),
            fmt(r.ce_mean),
            fmt(r.cs_mean),
            fmt(r.pe),
            fmt(r.oe),
            fmt(r.ce_step),
            fmt(r.cs_step),
            r.max_angular_speed
        );
    }
    out
}

/// Per-step trace of one episode as comma-separated text.
pub fn trace_csv(report: &RolloutReport, period: f64) -> String {
    let n = report.commands.first().map_or(0, |c| c.len());
    let mut out = String::from("step,t,pe,oe,ce,cs,angular_speed,tx,ty,tz,qw,qx,qy,qz");
    for j in 0..n {
        let _ = write!(out, ",qdot{j}");
    }
    out.push('\n');
    let mut prev = DVector::zeros(n);
    for (k, pose) in report.camera_poses.iter().enumerate() {
        let [qw, qx, qy, qz] = pose.wxyz();
        let t = pose.translation;
        let _ = write!(
            out,
            "{k},{:.6},{:.9},{:.9},",
            k as f64 * period,
            report.pe[k],
            report.oe[k]
        );
        match report.commands.get(k) {
            Some(c) => {
                let _ = write!(out, "{:.9},{:.9},{:.9e}", c.norm(), (c - &prev).norm() / period, report.angular_speed[k]);
                prev = c.clone();
            }
            None => out.push_str(",,"),
        }
        let _ = write!(out, ",{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", t.x, t.y, t.z, qw, qx, qy, qz);
        for j in 0..n {
            match report.commands.get(k) {
                Some(c) => {
                    let _ = write!(out, ",{:.9}", c[j]);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `summary.csv` and one `<name>_<episode>.csv` trace per episode.
pub fn write_report(dir: &Path, results: &[(BenchmarkRow, Vec<RolloutReport>)], period: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let rows: Vec<BenchmarkRow> = results.iter().map(|(r, _)| r.clone()).collect();
    write_text(&dir.join("summary.csv"), &summary_csv(&rows))?;
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).map_err(|e| Error::io(format!("creating {}", traces.display()), e))?;
    for (row, reports) in results {
        for (e, r) in reports.iter().enumerate() {
            write_text(&traces.join(format!("{}_{e:03}.csv", row.name)), &trace_csv(r, period))?;
        }
    }
    Ok(())
}

/// Per-step metric columns of a trace file: pe, oe, ce, cs.
fn read_trace(path: &Path) -> Result<Vec<[Option<f64>; 4]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))
    };
    let idx = [col("pe")?, col("oe")?, col("ce")?, col("cs")?];
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let mut row = [None; 4];
            for (slot, &i) in row.iter_mut().zip(&idx) {
                let v = f.get(i).ok_or_else(|| Error::Format(format!("{}: short row", path.display())))?;
                if !v.is_empty() {
                    *slot = Some(v.parse::<f64>().map_err(|_| Error::Format(format!("{}: bad number '{v}'", path.display())))?);
                }
            }
            Ok(row)
        })
        .collect()
}

/// Time-aligned quantile bands (first quartile, median, third quartile) of
/// PE, OE, CE and CS over every trace of a directory. Each step aggregates
/// the episodes still running at that step.
pub fn quantile_bands(trace_dir: &Path) -> Result<String> {
    let mut files: Vec<_> = std::fs::read_dir(trace_dir)
        .map_err(|e| Error::io(format!("reading {}", trace_dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "summary.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("no trace files in {}", trace_dir.display())));
    }
    let traces = files.iter().map(|f| read_trace(f)).collect::<Result<Vec<_>>>()?;
    let steps = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut out = String::from("step,episodes");
    for m in ["pe", "oe", "ce", "cs"] {
        let _ = write!(out, ",{m}_q1,{m}_median,{m}_q3");
    }
    out.push('\n');
    for k in 0..steps {
        let alive = traces.iter().filter(|t| k < t.len()).count();
        let _ = write!(out, "{k},{alive}");
        for m in 0..4 {
            let v: Vec<f64> = traces.iter().filter_map(|t| t.get(k).and_then(|r| r[m])).collect();
            for p in [0.25, 0.5, 0.75] {
                let _ = write!(out, ",{}", fmt_prec(quantile(&v, p), 9));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// One ablation variant: loss weights and the imitation-gradient detach.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub weights: LossWeights,
    pub detach_interaction: bool,
}

pub fn default_ablations() -> Vec<AblationVariant> {
    let v = |name: &str, w: [f64; 4], detach: bool| AblationVariant {
        name: name.into(),
        weights: LossWeights {
            ci: w[0],
            ae: w[1],
            sc: w[2],
            r: w[3],
        },
        detach_interaction: detach,
    };
    vec![
        v("full", [1.0, 1.0, 1.0, 1.0], false),
        v("ci_only", [1.0, 0.0, 0.0, 0.0], false),
        v("no_ae", [1.0, 0.0, 1.0, 1.0], false),
        v("no_sc", [1.0, 1.0, 0.0, 1.0], false),
        v("no_r", [1.0, 1.0, 1.0, 0.0], false),
        v("detached", [1.0, 1.0, 1.0, 1.0], true),
        v("all_zero", [0.0, 0.0, 0.0, 0.0], false),
    ]
}

/// Trains every variant with the shared seed and benchmarks it on shared
/// episode seeds.
pub fn ablate(
    ds: &Dataset,
    tc: &TrainConfig,
    variants: &[AblationVariant],
    rig: &Rig,
    episodes: usize,
    master_seed: u64,
    ec: &EpisodeConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::new();
    for v in variants {
        progress(&v.name);
        let tc = TrainConfig {
            detach_interaction: v.detach_interaction,
            ..tc.clone()
        };
        let outcome = train(ds, &tc, &v.weights, None, &mut |_| {})?;
        let reports = run_episodes(rig, Controller::Neural(&outcome.best, ControlMode::Vs), episodes, master_seed, ec)?;
        rows.push(summarize(&v.name, &reports, ec.control.period));
    }
    Ok(rows)
}

/// Largest camera angular speed over a set of episodes.
pub fn max_angular_speed(reports: &[RolloutReport]) -> f64 {
    reports.iter().flat_map(|r| r.angular_speed.iter().copied()).fold(0.0, f64::max)
}
