//! Synthetic replacement for the simulated robot cell: scene sampling,
//! ray-cast rendering, ground-truth features and joint integration.

mod image;
mod render;
mod scene;

use nalgebra::{DMatrix, DVector, Matrix6};

pub use image::{ImageTensor, ImageU8};
pub use render::{render, render_labels, Surface};
pub use scene::{ground_truth_features, randomize_scene, Scene, SceneRanges, Texture, TextureKind};

use crate::config::Config;
use crate::control::{DepthVector, FeatureVector};
use crate::error::{Error, Result};
use crate::geometry::{twist_transform, CameraIntrinsics, Pose};
use crate::kinematics::{JointState, KinematicChain};

/// Robot, hand-mounted camera and intrinsics.
#[derive(Debug, Clone)]
pub struct Rig {
    pub chain: KinematicChain,
    /// Camera pose in the end-effector frame.
    pub mount: Pose,
    pub velocity_transform: Matrix6<f64>,
    pub intrinsics: CameraIntrinsics,
}

impl Rig {
    pub fn new(chain: KinematicChain, mount: Pose, intrinsics: CameraIntrinsics) -> Result<Self> {
        chain.validate()?;
        intrinsics.validate()?;
        Ok(Self {
            velocity_transform: twist_transform(&mount),
            chain,
            mount,
            intrinsics,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(cfg.chain()?, cfg.mount(), cfg.intrinsics()?)
    }

    pub fn camera_pose(&self, q: &DVector<f64>) -> Result<Pose> {
        Ok(self.chain.forward_kinematics(q)?.compose(&self.mount))
    }

    /// End-effector pose that puts the camera at `camera_pose`.
    pub fn flange_for_camera(&self, camera_pose: &Pose) -> Pose {
        camera_pose.compose(&self.mount.inverse())
    }

    pub fn observe(&self, scene: &Scene, q: &DVector<f64>) -> Result<ImageTensor> {
        Ok(render(scene, &self.camera_pose(q)?, &self.intrinsics)?.quantized())
    }

    pub fn features(&self, scene: &Scene, q: &DVector<f64>) -> Result<(FeatureVector, DepthVector)> {
        ground_truth_features(scene, &self.camera_pose(q)?, &self.intrinsics)
    }
}

/// Closed-loop simulation state, advanced only through [`SimState::step`].
#[derive(Debug, Clone)]
pub struct SimState {
    pub joints: JointState,
    pub scene: Scene,
    pub scene_seed: u64,
    pub step: u64,
    /// Set when any step had to clamp a joint to its limits.
    pub limit_hit: bool,
}

impl SimState {
    pub fn new(q: DVector<f64>, scene: Scene, scene_seed: u64) -> Self {
        Self {
            joints: JointState::at_rest(q),
            scene,
            scene_seed,
            step: 0,
            limit_hit: false,
        }
    }

    /// Explicit Euler: `q ← clamp(q + T·q̇)`.
    pub fn step(&mut self, chain: &KinematicChain, qdot: &DVector<f64>, period: f64) -> Result<()> {
        if period <= 0.0 || !period.is_finite() {
            return Err(Error::Config(format!("control period must be positive, got {period}")));
        }
        if qdot.len() != self.joints.positions.len() {
            return Err(Error::dims(format!(
                "command has {} entries for {} joints",
                qdot.len(),
                self.joints.positions.len()
            )));
        }
        self.joints.positions += qdot * period;
        self.joints.velocities = qdot.clone();
        if chain.clamp_to_limits(&mut self.joints.positions) {
            self.limit_hit = true;
        }
        self.step += 1;
        Ok(())
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.joints.positions
    }
}

/// Rig Jacobian mapping joint velocities to the camera twist: `V · J_r`.
pub fn camera_twist_jacobian(rig: &Rig, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let jr = rig.chain.robot_jacobian(q)?;
    Ok(DMatrix::from_iterator(6, 6, rig.velocity_transform.iter().copied()) * jr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use std::f64::consts::PI;

    fn cfg() -> Config {
        Config::default()
    }

    fn rig() -> Rig {
        Rig::from_config(&cfg()).unwrap()
    }

    fn nadir(scene: &Scene, height: f64) -> Pose {
        scene.desired_camera_pose(height)
    }

    fn square_scene() -> Scene {
        let mut ranges = SceneRanges::default();
        ranges.box_size = Vector3::new(0.1, 0.1, 0.05);
        ranges.workspace_x = [0.5, 0.5];
        ranges.workspace_y = [0.0, 0.0];
        ranges.yaw = [0.0, 0.0];
        randomize_scene(3, &ranges)
    }

    #[test]
    fn same_seed_same_scene() {
        let r = SceneRanges::default();
        assert_eq!(randomize_scene(11, &r), randomize_scene(11, &r));
        assert_ne!(randomize_scene(11, &r), randomize_scene(12, &r));
    }

    #[test]
    fn positions_cover_window() {
        let r = SceneRanges::default();
        let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for seed in 0..1000 {
            let s = randomize_scene(seed, &r);
            let t = s.object_pose.translation;
            lo_x = lo_x.min(t.x);
            hi_x = hi_x.max(t.x);
            lo_y = lo_y.min(t.y);
            hi_y = hi_y.max(t.y);
            assert!((0.3..=1.7).contains(&s.brightness));
            assert!((s.light_dir.norm() - 1.0).abs() < 1e-12);
        }
        let wx = r.workspace_x[1] - r.workspace_x[0];
        let wy = r.workspace_y[1] - r.workspace_y[0];
        assert!(lo_x - r.workspace_x[0] <= 0.05 * wx && r.workspace_x[1] - hi_x <= 0.05 * wx);
        assert!(lo_y - r.workspace_y[0] <= 0.05 * wy && r.workspace_y[1] - hi_y <= 0.05 * wy);
    }

    #[test]
    fn zero_width_window_is_constant() {
        let mut r = SceneRanges::default();
        r.workspace_x = [0.47, 0.47];
        r.workspace_y = [0.01, 0.01];
        for seed in 0..20 {
            let t = randomize_scene(seed, &r).object_pose.translation;
            assert_eq!((t.x, t.y), (0.47, 0.01));
        }
    }

    #[test]
    fn centered_box_renders_at_principal_point() {
        let scene = square_scene();
        let k = cfg().intrinsics().unwrap();
        let labels = render_labels(&scene, &nadir(&scene, 0.3), &k).unwrap();
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for (idx, l) in labels.iter().enumerate() {
            if *l == Surface::Face(0) {
                su += (idx % k.width) as f64 + 0.5;
                sv += (idx / k.width) as f64 + 0.5;
                n += 1.0;
            }
        }
        assert!(n > 50.0);
        assert!((su / n - k.cx).abs() <= 1.0 && (sv / n - k.cy).abs() <= 1.0);
    }

    #[test]
    fn brightness_gain_is_linear_before_clamp() {
        let scene = randomize_scene(5, &SceneRanges::default());
        let k = cfg().intrinsics().unwrap();
        let cam = nadir(&scene, 0.3);
        let base = render::render_radiance(&scene, &cam, &k, 1.0, false);
        let g = 1.37;
        let scaled = render::render_radiance(&scene, &cam, &k, g, false);
        for (a, b) in base.data.iter().zip(&scaled.data) {
            assert!((b - a * g as f32).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn render_in_unit_range_and_finite() {
        let k = cfg().intrinsics().unwrap();
        for seed in 0..30 {
            let scene = randomize_scene(seed, &SceneRanges::default());
            let cam = Pose::from_rpy(PI + 0.2, -0.15, 0.3, scene.top_center_world() + Vector3::new(0.05, -0.03, 0.25));
            let img = render(&scene, &cam, &k).unwrap();
            assert_eq!(img.shape(), (64, 64, 3));
            assert!(img.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn camera_inside_box_is_rejected() {
        let scene = square_scene();
        let cam = Pose::new(UnitQuaternion::identity(), scene.object_pose.translation + Vector3::new(0.0, 0.0, 0.02));
        assert!(matches!(render(&scene, &cam, &cfg().intrinsics().unwrap()), Err(Error::CameraInsideObject)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = randomize_scene(9, &SceneRanges::default());
        let cam = nadir(&scene, 0.3);
        let k = cfg().intrinsics().unwrap();
        assert_eq!(render(&scene, &cam, &k).unwrap().to_u8(), render(&scene, &cam, &k).unwrap().to_u8());
    }

    #[test]
    fn nadir_features_form_centered_square() {
        let scene = square_scene();
        let (s, z) = ground_truth_features(&scene, &nadir(&scene, 0.3), &cfg().intrinsics().unwrap()).unwrap();
        let p: Vec<(f64, f64)> = (0..4).map(|i| s.point(i)).collect();
        for i in 0..4 {
            let opposite = p[(i + 2) % 4];
            assert!((p[i].0 + opposite.0).abs() < 1e-12 && (p[i].1 + opposite.1).abs() < 1e-12);
            assert!((p[i].0.abs() - p[0].0.abs()).abs() < 1e-12 && (p[i].0.abs() - p[i].1.abs()).abs() < 1e-12);
            assert!((z.as_slice()[i] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_distance_halves_spread() {
        let scene = square_scene();
        let k = cfg().intrinsics().unwrap();
        let (near, _) = ground_truth_features(&scene, &nadir(&scene, 0.2), &k).unwrap();
        let (far, _) = ground_truth_features(&scene, &nadir(&scene, 0.4), &k).unwrap();
        for (a, b) in near.as_slice().iter().zip(far.as_slice()) {
            assert!((a / 2.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_matches_pose_composition() {
        let scene = randomize_scene(4, &SceneRanges::default());
        let cam = Pose::from_rpy(PI + 0.1, 0.05, -0.4, scene.top_center_world() + Vector3::new(0.02, 0.01, 0.3));
        let (_, z) = ground_truth_features(&scene, &cam, &cfg().intrinsics().unwrap()).unwrap();
        let cam_to_obj = cam.inverse().compose(&scene.object_pose);
        for (corner, depth) in scene.top_corners_object().iter().zip(z.as_slice()) {
            assert!((cam_to_obj.transform_point(corner).z - depth).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_behind_camera_is_rejected() {
        let scene = square_scene();
        let cam = Pose::from_rpy(0.0, 0.0, 0.0, scene.top_center_world() + Vector3::new(0.0, 0.0, 0.3));
        assert!(matches!(
            ground_truth_features(&scene, &cam, &cfg().intrinsics().unwrap()),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    fn state() -> (Rig, SimState) {
        let rig = rig();
        let scene = randomize_scene(1, &SceneRanges::default());
        (rig, SimState::new(cfg().initial_posture(), scene, 1))
    }

    #[test]
    fn zero_command_keeps_q() {
        let (rig, mut st) = state();
        let q0 = st.q().clone();
        st.step(&rig.chain, &DVector::zeros(7), 1.0 / 30.0).unwrap();
        assert_eq!(st.q(), &q0);
        assert_eq!(st.step, 1);
        assert!(!st.limit_hit);
    }

    #[test]
    fn unit_step_moves_one_joint() {
        let (rig, mut st) = state();
        let q0 = st.q().clone();
        let mut e = DVector::zeros(7);
        e[0] = 1.0;
        st.step(&rig.chain, &e, 1.0).unwrap();
        assert_eq!(st.q()[0], q0[0] + 1.0);
        assert_eq!(st.q().rows(1, 6), q0.rows(1, 6));
    }

    #[test]
    fn half_steps_match_full_step() {
        let (rig, mut a) = state();
        let mut b = a.clone();
        let qd = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.3, -0.1, 0.2, 0.25]);
        a.step(&rig.chain, &qd, 0.5).unwrap();
        a.step(&rig.chain, &qd, 0.5).unwrap();
        b.step(&rig.chain, &qd, 1.0).unwrap();
        assert!((a.q() - b.q()).amax() < 1e-15);
    }

    #[test]
    fn limits_clamp_and_flag() {
        let (rig, mut st) = state();
        let mut qd = DVector::zeros(7);
        qd[3] = 100.0;
        st.step(&rig.chain, &qd, 1.0).unwrap();
        assert!(st.limit_hit);
        assert_eq!(st.q()[3], rig.chain.upper[3]);
    }

    #[test]
    fn non_positive_period_is_rejected() {
        let (rig, mut st) = state();
        assert!(st.step(&rig.chain, &DVector::zeros(7), 0.0).is_err());
    }

    #[test]
    fn camera_jacobian_matches_fd_camera_twist() {
        let rig = rig();
        let q = cfg().initial_posture();
        let j = camera_twist_jacobian(&rig, &q).unwrap();
        let p0 = rig.camera_pose(&q).unwrap();
        let h = 1e-6;
        for col in 0..7 {
            let mut qp = q.clone();
            qp[col] += h;
            let p1 = rig.camera_pose(&qp).unwrap();
            let rel = p0.inverse().compose(&p1);
            let tw = crate::geometry::se3_log(&rel) / h;
            for r in 0..6 {
                assert!((tw[r] - j[(r, col)]).abs() < 1e-5, "col {col} row {r}");
            }
        }
    }
}
