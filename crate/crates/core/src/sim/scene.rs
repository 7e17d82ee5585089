use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;

use crate::config::Config;
use crate::control::{DepthVector, FeatureVector};
use crate::error::Result;
use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Plain,
    Checker,
    Stripes,
    Waves,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [TextureKind::Plain, TextureKind::Checker, TextureKind::Stripes, TextureKind::Waves];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// Pattern period on the work surface (m).
    pub scale: f64,
    /// Pattern orientation (rad).
    pub angle: f64,
}

impl Texture {
    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let u = (c * x + s * y) / self.scale;
        let v = (-s * x + c * y) / self.scale;
        let mix = match self.kind {
            TextureKind::Plain => 0.0,
            TextureKind::Checker => ((u.floor() + v.floor()).rem_euclid(2.0) == 1.0) as u8 as f64,
            TextureKind::Stripes => (u.floor().rem_euclid(2.0) == 1.0) as u8 as f64,
            TextureKind::Waves => {
                let tau = std::f64::consts::TAU;
                0.5 + 0.5 * (tau * u).sin() * (tau * 0.7 * v + 1.3).sin()
            }
        };
        std::array::from_fn(|k| self.base[k] * (1.0 - mix) + self.accent[k] * mix)
    }
}

/// Randomized task scene: a box on a textured work surface (z = 0).
///
/// The object frame sits at the center of the box's bottom face, z up; the
/// box spans `[-sx/2, sx/2] × [-sy/2, sy/2] × [0, sz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub object_pose: Pose,
    pub box_size: Vector3<f64>,
    /// Colors of the top, +x, −x, +y, −y and bottom faces.
    pub face_colors: [[f64; 3]; 6],
    pub texture: Texture,
    /// Unit vector from the surface toward the light.
    pub light_dir: Vector3<f64>,
    pub brightness: f64,
}

/// Sampling ranges for [`randomize_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRanges {
    pub box_size: Vector3<f64>,
    pub workspace_x: [f64; 2],
    pub workspace_y: [f64; 2],
    pub yaw: [f64; 2],
    pub brightness: [f64; 2],
    pub light_elevation_deg: [f64; 2],
    pub texture_scale: [f64; 2],
}

impl SceneRanges {
    pub fn from_config(cfg: &Config) -> Self {
        let pair = |name: &str| {
            let v = cfg.floats(name);
            [v[0], v[1]]
        };
        let b = cfg.floats("sim.box_size");
        Self {
            box_size: Vector3::new(b[0], b[1], b[2]),
            workspace_x: pair("sim.workspace_x"),
            workspace_y: pair("sim.workspace_y"),
            yaw: pair("sim.yaw_range"),
            brightness: pair("sim.brightness"),
            light_elevation_deg: pair("sim.light_elevation_deg"),
            texture_scale: pair("sim.texture_scale"),
        }
    }
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

/// Samples a scene deterministically from `seed`.
pub fn randomize_scene(seed: u64, ranges: &SceneRanges) -> Scene {
    let mut rng = rng::stream(seed, rng::domain::SCENE, 0);
    let x = uniform(&mut rng, ranges.workspace_x);
    let y = uniform(&mut rng, ranges.workspace_y);
    let yaw = uniform(&mut rng, ranges.yaw);
    let top = color(&mut rng);
    let side = color(&mut rng);
    let side_dark: [f64; 3] = std::array::from_fn(|k| side[k] * 0.8);
    let face_colors = [top, side, side, side_dark, side_dark, side];
    let kind = TextureKind::ALL[rng.random_range(0..TextureKind::ALL.len())];
    let base = color(&mut rng);
    let accent = color(&mut rng);
    let texture = Texture {
        kind,
        base,
        accent,
        scale: uniform(&mut rng, ranges.texture_scale),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let elevation = uniform(&mut rng, ranges.light_elevation_deg).to_radians();
    let azimuth = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let light_dir = Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    );
    let brightness = uniform(&mut rng, ranges.brightness);
    Scene {
        object_pose: Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, yaw), Vector3::new(x, y, 0.0)),
        box_size: ranges.box_size,
        face_colors,
        texture,
        light_dir,
        brightness,
    }
}

impl Scene {
    /// The four top-face corners in the object frame, in their fixed order.
    pub fn top_corners_object(&self) -> [Vector3<f64>; 4] {
        let (hx, hy, z) = (self.box_size.x / 2.0, self.box_size.y / 2.0, self.box_size.z);
        [
            Vector3::new(hx, hy, z),
            Vector3::new(-hx, hy, z),
            Vector3::new(-hx, -hy, z),
            Vector3::new(hx, -hy, z),
        ]
    }

    pub fn top_corners_world(&self) -> [Vector3<f64>; 4] {
        self.top_corners_object().map(|c| self.object_pose.transform_point(&c))
    }

    pub fn top_center_world(&self) -> Vector3<f64> {
        self.object_pose
            .transform_point(&Vector3::new(0.0, 0.0, self.box_size.z))
    }

    /// Camera pose at which the task is complete: `height` above the top
    /// face center, optical axis pointing straight down, fixed world yaw.
    pub fn desired_camera_pose(&self, height: f64) -> Pose {
        Pose::new(
            UnitQuaternion::from_euler_angles(std::f64::consts::PI, 0.0, 0.0),
            self.top_center_world() + Vector3::new(0.0, 0.0, height),
        )
    }

    /// True if the world point lies strictly inside the box.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let o = self.object_pose.inverse().transform_point(p);
        o.x.abs() < self.box_size.x / 2.0 && o.y.abs() < self.box_size.y / 2.0 && o.z > 0.0 && o.z < self.box_size.z
    }
}

/// Projects the four tracked top-face corners.
pub fn ground_truth_features(scene: &Scene, camera_pose: &Pose, k: &CameraIntrinsics) -> Result<(FeatureVector, DepthVector)> {
    let world_to_cam = camera_pose.inverse();
    let mut s = Vec::with_capacity(8);
    let mut z = Vec::with_capacity(4);
    for corner in scene.top_corners_world() {
        let pr = project(&world_to_cam.transform_point(&corner), k)?;
        s.push(pr.x);
        s.push(pr.y);
        z.push(pr.depth);
    }
    Ok((FeatureVector::from_slice(&s)?, DepthVector::from_slice(&z)?))
}
