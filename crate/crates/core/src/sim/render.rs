//! Per-pixel ray casting of the box-on-surface scene.
//!
//! Each pixel is the average of a 2×2 grid of pinhole rays; every ray keeps
//! the nearest of the box and ground-plane hits (a depth test), then applies
//! Lambertian shading and the scene's brightness gain.

use nalgebra::Vector3;

use super::image::ImageTensor;
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;
const SKY: [f64; 3] = [0.05, 0.05, 0.05];
const SUBSAMPLES: usize = 2;

/// What a camera ray hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Sky,
    Ground,
    /// Box face index: 0 top, 1 +x, 2 −x, 3 +y, 4 −y, 5 bottom.
    Face(u8),
}

struct Caster<'a> {
    scene: &'a Scene,
    origin: Vector3<f64>,
    origin_obj: Vector3<f64>,
    cam: &'a Pose,
    world_to_obj: Pose,
}

impl<'a> Caster<'a> {
    fn new(scene: &'a Scene, cam: &'a Pose) -> Self {
        let world_to_obj = scene.object_pose.inverse();
        Self {
            scene,
            origin: cam.translation,
            origin_obj: world_to_obj.transform_point(&cam.translation),
            cam,
            world_to_obj,
        }
    }

    /// Slab test against the box in the object frame.
    fn hit_box(&self, dir_obj: &Vector3<f64>) -> Option<(f64, u8)> {
        let half = Vector3::new(self.scene.box_size.x / 2.0, self.scene.box_size.y / 2.0, self.scene.box_size.z / 2.0);
        let center = Vector3::new(0.0, 0.0, half.z);
        let o = self.origin_obj - center;
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0usize;
        for a in 0..3 {
            if dir_obj[a].abs() < 1e-15 {
                if o[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-half[a] - o[a]) / dir_obj[a];
            let t2 = (half[a] - o[a]) / dir_obj[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                axis = a;
            }
            t_far = t_far.min(hi);
        }
        if t_near > t_far || t_near <= 0.0 {
            return None;
        }
        // Face entered: the side facing against the ray on the entry axis.
        let positive = dir_obj[axis] < 0.0;
        let face = match (axis, positive) {
            (2, true) => 0,
            (0, true) => 1,
            (0, false) => 2,
            (1, true) => 3,
            (1, false) => 4,
            _ => 5,
        };
        Some((t_near, face))
    }

    fn cast(&self, x: f64, y: f64) -> (Surface, [f64; 3]) {
        let dir = self.cam.rotation * Vector3::new(x, y, 1.0);
        let dir_obj = self.world_to_obj.rotation * dir;
        let ground_t = if dir.z < 0.0 && self.origin.z > 0.0 {
            Some(-self.origin.z / dir.z)
        } else {
            None
        };
        let box_hit = self.hit_box(&dir_obj);
        let scene = self.scene;
        let shade = |normal: &Vector3<f64>, albedo: [f64; 3]| -> [f64; 3] {
            let lambert = AMBIENT + DIFFUSE * normal.dot(&scene.light_dir).max(0.0);
            albedo.map(|a| a * lambert)
        };
        match (box_hit, ground_t) {
            (Some((tb, face)), tg) if tg.is_none_or(|tg| tb <= tg) => {
                let n_obj = match face {
                    0 => Vector3::z(),
                    1 => Vector3::x(),
                    2 => -Vector3::x(),
                    3 => Vector3::y(),
                    4 => -Vector3::y(),
                    _ => -Vector3::z(),
                };
                let normal = scene.object_pose.rotation * n_obj;
                (Surface::Face(face), shade(&normal, scene.face_colors[face as usize]))
            }
            (_, Some(tg)) => {
                let p = self.origin + dir * tg;
                (Surface::Ground, shade(&Vector3::z(), scene.texture.albedo(p.x, p.y)))
            }
            _ => (Surface::Sky, SKY),
        }
    }
}

fn check_camera(scene: &Scene, camera_pose: &Pose) -> Result<()> {
    if scene.contains(&camera_pose.translation) {
        return Err(Error::CameraInsideObject);
    }
    Ok(())
}

/// Renders the scene seen from `camera_pose` (camera-to-world).
///
/// Pixel values are `clamp(gain · radiance, 0, 1)`; 1-channel images store
/// the mean of the color channels.
pub fn render(scene: &Scene, camera_pose: &Pose, k: &CameraIntrinsics) -> Result<ImageTensor> {
    check_camera(scene, camera_pose)?;
    Ok(render_radiance(scene, camera_pose, k, scene.brightness, true))
}

pub(crate) fn render_radiance(scene: &Scene, camera_pose: &Pose, k: &CameraIntrinsics, gain: f64, clamp: bool) -> ImageTensor {
    let caster = Caster::new(scene, camera_pose);
    let mut img = ImageTensor::zeros(k.height, k.width, k.channels);
    let step = 1.0 / SUBSAMPLES as f64;
    let norm = 1.0 / (SUBSAMPLES * SUBSAMPLES) as f64;
    for row in 0..k.height {
        for col in 0..k.width {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let u = col as f64 + (sx as f64 + 0.5) * step;
                    let v = row as f64 + (sy as f64 + 0.5) * step;
                    let n = k.to_normalized(u, v);
                    let (_, rgb) = caster.cast(n.x, n.y);
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            let base = (row * k.width + col) * k.channels;
            let finish = |v: f64| {
                let v = v * norm * gain;
                (if clamp { v.clamp(0.0, 1.0) } else { v }) as f32
            };
            if k.channels == 1 {
                img.data[base] = finish((acc[0] + acc[1] + acc[2]) / 3.0);
            } else {
                for c in 0..3 {
                    img.data[base + c] = finish(acc[c]);
                }
            }
        }
    }
    img
}

/// Surface hit by the ray through each pixel center (row-major).
pub fn render_labels(scene: &Scene, camera_pose: &Pose, k: &CameraIntrinsics) -> Result<Vec<Surface>> {
    check_camera(scene, camera_pose)?;
    let caster = Caster::new(scene, camera_pose);
    let mut out = Vec::with_capacity(k.width * k.height);
    for row in 0..k.height {
        for col in 0..k.width {
            let n = k.to_normalized(col as f64 + 0.5, row as f64 + 0.5);
            out.push(caster.cast(n.x, n.y).0);
        }
    }
    Ok(out)
}
