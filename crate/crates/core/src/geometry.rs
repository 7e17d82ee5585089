//! Rigid transforms, pinhole projection and rotation metrics.
//!
//! Conventions used across the crate:
//!
//! * A [`Pose`] `T_ab` maps coordinates of frame `b` into frame `a`:
//!   `p_a = R_ab * p_b + t_ab`. Composition is `T_ac = T_ab.compose(&T_bc)`.
//! * Quaternions are scalar-first `(w, x, y, z)` with the Hamilton product.
//! * Twists are ordered `(v, ω)`: linear velocity first, then angular.
//! * Image features live in normalized coordinates `x = X/Z`, `y = Y/Z`;
//!   pixels only appear at the renderer boundary.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Smallest depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;

/// Rigid transform: unit quaternion rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a scalar-first quaternion, rejecting non-unit input.
    pub fn from_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        check_unit(&quat, 1e-9)?;
        Ok(Self::new(UnitQuaternion::new_unchecked(quat), translation))
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Roll-pitch-yaw (about fixed x, y, z axes) plus translation.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_euler_angles(roll, pitch, yaw), translation)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Scalar-first quaternion coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Applies a twist `(v, ω)` expressed in this pose's own (body) frame for
    /// a duration `dt`, using the exact SE(3) exponential.
    pub fn integrate_body_twist(&self, twist: &Twist, dt: f64) -> Pose {
        self.compose(&se3_exp(&(twist.to_vector() * dt)))
    }
}

/// Pinhole intrinsics plus image geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl CameraIntrinsics {
    /// Square image with the principal point at its center and the given
    /// horizontal field of view (radians).
    pub fn from_fov(size: usize, channels: usize, fov: f64) -> Self {
        let f = size as f64 / 2.0 / (fov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }

    /// Normalized coordinates to continuous pixel coordinates. Pixel `(u, v)`
    /// covers `[u, u+1) x [v, v+1)`.
    pub fn to_pixel(&self, x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(self.fx * x + self.cx, self.fy * y + self.cy)
    }

    pub fn to_normalized(&self, u: f64, v: f64) -> Vector2<f64> {
        Vector2::new((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height * self.channels
    }
}

/// Rigid-body velocity: linear (m/s) then angular (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        v.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

/// A point projected onto the normalized image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl Projection {
    pub fn pixel(&self, k: &CameraIntrinsics) -> Vector2<f64> {
        k.to_pixel(self.x, self.y)
    }

    pub fn back_project(&self) -> Vector3<f64> {
        Vector3::new(self.x * self.depth, self.y * self.depth, self.depth)
    }
}

/// Projects a camera-frame point to normalized coordinates.
///
/// The intrinsics are only needed by callers that want pixel coordinates
/// through [`Projection::pixel`]; the normalized result does not depend on them.
pub fn project(point_cam: &Vector3<f64>, _k: &CameraIntrinsics) -> Result<Projection> {
    let z = point_cam.z;
    if !(z > MIN_DEPTH) {
        return Err(Error::NonPositiveDepth { depth: z });
    }
    Ok(Projection {
        x: point_cam.x / z,
        y: point_cam.y / z,
        depth: z,
    })
}

fn check_unit(q: &Quaternion<f64>, tol: f64) -> Result<()> {
    let norm = q.norm();
    if (norm - 1.0).abs() > tol || !norm.is_finite() {
        return Err(Error::NotUnitQuaternion { norm });
    }
    Ok(())
}

/// Geodesic angle between two rotations, `2·acos(|<q1, q2>|)`, in `[0, π]`.
pub fn quat_distance(q1: &Quaternion<f64>, q2: &Quaternion<f64>) -> Result<f64> {
    check_unit(q1, 1e-6)?;
    check_unit(q2, 1e-6)?;
    // 2·acos(|<q1,q2>|), evaluated via atan2 to stay exact near zero
    let b = if q1.coords.dot(&q2.coords) < 0.0 { -q2.coords } else { q2.coords };
    let half = (q1.coords - b).norm().atan2((q1.coords + b).norm());
    Ok(4.0 * half)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Velocity transform from the end-effector frame to the camera frame.
///
/// `pose_ec` is the camera pose expressed in the end-effector frame
/// (`R`, `t`). An end-effector twist `(v_e, ω_e)` written in the end-effector
/// frame maps to the camera twist
///
/// ```text
/// ω_c = Rᵀ ω_e
/// v_c = Rᵀ (v_e + ω_e × t) = Rᵀ v_e − Rᵀ [t]× ω_e
/// ```
///
/// so `V = [Rᵀ, Rᵀ·skew(−t); 0, Rᵀ]`.
pub fn twist_transform(pose_ec: &Pose) -> Matrix6<f64> {
    let rt = pose_ec.rotation_matrix().transpose();
    let coupling = rt * skew(&(-pose_ec.translation));
    let mut v = Matrix6::zeros();
    v.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    v.fixed_view_mut::<3, 3>(0, 3).copy_from(&coupling);
    v.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
    v
}

/// SE(3) exponential of a `(ρ, φ)` tangent vector.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let theta = phi.norm();
    let k = skew(&phi);
    let v = if theta < 1e-9 {
        Matrix3::identity() + 0.5 * k
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
    };
    Pose::new(UnitQuaternion::from_scaled_axis(phi), v * rho)
}

/// SE(3) logarithm, inverse of [`se3_exp`].
pub fn se3_log(pose: &Pose) -> Vector6<f64> {
    let phi = pose.rotation.scaled_axis();
    let theta = phi.norm();
    let k = skew(&phi);
    let v_inv = if theta < 1e-9 {
        Matrix3::identity() - 0.5 * k
    } else {
        let half = theta / 2.0;
        Matrix3::identity() - 0.5 * k + (1.0 - half * half.cos() / half.sin()) / (theta * theta) * k * k
    };
    let rho = v_inv * pose.translation;
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&rho);
    out.fixed_rows_mut::<3>(3).copy_from(&phi);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::from_fov(64, 3, 60f64.to_radians())
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter("non-degenerate quaternion", |(q, _)| {
                q.iter().map(|v| v * v).sum::<f64>() > 1e-3
            })
            .prop_map(|(q, t)| {
                let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
                Pose::new(quat, Vector3::from(t))
            })
    }

    #[test]
    fn project_optical_axis() {
        let p = project(&Vector3::new(0.0, 0.0, 1.0), &k64()).unwrap();
        assert_eq!((p.x, p.y, p.depth), (0.0, 0.0, 1.0));
    }

    #[test]
    fn project_divides_by_depth() {
        let p = project(&Vector3::new(1.0, 0.0, 2.0), &k64()).unwrap();
        assert_eq!((p.x, p.y, p.depth), (0.5, 0.0, 2.0));
    }

    #[test]
    fn project_matches_homogeneous_matrix() {
        // Independent route: [K | 0] · [X Y Z 1]ᵀ, then divide by the third row.
        let k = k64();
        let point = Vector3::new(0.3, -0.2, 1.5);
        let km = nalgebra::Matrix3x4::new(k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0);
        let h = km * nalgebra::Vector4::new(point.x, point.y, point.z, 1.0);
        let (u, v) = (h.x / h.z, h.y / h.z);
        let p = project(&point, &k).unwrap();
        let px = p.pixel(&k);
        assert!((px.x - u).abs() < 1e-12 && (px.y - v).abs() < 1e-12);
        assert!((p.depth - h.z).abs() < 1e-15);
        assert!((p.x - 0.2).abs() < 1e-15 && (p.y + 0.2 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn project_rejects_points_behind() {
        for z in [0.0, 1e-7, -1.0] {
            assert!(matches!(
                project(&Vector3::new(0.1, 0.1, z), &k64()),
                Err(Error::NonPositiveDepth { .. })
            ));
        }
    }

    #[test]
    fn quat_distance_identical_and_double_cover() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        assert_eq!(quat_distance(&q, &q).unwrap(), 0.0);
        assert_eq!(quat_distance(&q, &(-q)).unwrap(), 0.0);
    }

    #[test]
    fn quat_distance_matches_rotation_matrix_geodesic() {
        let q1 = UnitQuaternion::<f64>::identity();
        let q2 = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let r1 = q1.to_rotation_matrix().into_inner();
        let r2 = q2.to_rotation_matrix().into_inner();
        let oracle = (((r1.transpose() * r2).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        let d = quat_distance(q1.quaternion(), q2.quaternion()).unwrap();
        assert!((d - oracle).abs() < 1e-12);
        assert!((d - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn quat_distance_rejects_non_unit() {
        let q = Quaternion::new(1.0, 0.1, 0.0, 0.0);
        assert!(matches!(
            quat_distance(&q, &Quaternion::identity()),
            Err(Error::NotUnitQuaternion { .. })
        ));
    }

    #[test]
    fn twist_transform_identity_is_exact() {
        assert_eq!(twist_transform(&Pose::identity()), Matrix6::identity());
    }

    #[test]
    fn twist_transform_pure_rotation_is_block_diagonal() {
        let pose = Pose::from_rpy(0.2, -0.4, 1.3, Vector3::zeros());
        let v = twist_transform(&pose);
        let rt = pose.rotation_matrix().transpose();
        assert!((v.fixed_view::<3, 3>(0, 0) - rt).norm() < 1e-15);
        assert!((v.fixed_view::<3, 3>(3, 3) - rt).norm() < 1e-15);
        assert_eq!(v.fixed_view::<3, 3>(0, 3).norm(), 0.0);
        assert_eq!(v.fixed_view::<3, 3>(3, 0).norm(), 0.0);
    }

    #[test]
    fn twist_transform_matches_finite_difference_of_attached_frame() {
        // Move the end-effector with a body twist for a small dt, recompute the
        // rigidly attached camera pose, and read its body twist back from the
        // SE(3) log of the relative motion.
        let pose_ec = Pose::from_rpy(0.3, -0.2, 0.9, Vector3::new(0.05, -0.02, 0.08));
        let pose_be = Pose::from_rpy(-0.5, 0.1, 0.4, Vector3::new(0.4, 0.1, 0.5));
        let twist_e = Vector6::new(0.1, -0.3, 0.2, 0.7, -0.4, 0.5);
        let dt = 1e-6;
        let cam0 = pose_be.compose(&pose_ec);
        let cam1 = pose_be.compose(&se3_exp(&(twist_e * dt))).compose(&pose_ec);
        let fd = se3_log(&cam0.inverse().compose(&cam1)) / dt;
        let analytic = twist_transform(&pose_ec) * twist_e;
        assert!((fd - analytic).norm() < 1e-5, "fd {fd} analytic {analytic}");
    }

    #[test]
    fn se3_log_inverts_exp() {
        let xi = Vector6::new(0.1, -0.2, 0.3, 0.4, -0.5, 0.6);
        assert!((se3_log(&se3_exp(&xi)) - xi).norm() < 1e-12);
    }

    #[test]
    fn quat_distance_bounded_at_pi() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI);
        let d = quat_distance(q.quaternion(), &Quaternion::identity()).unwrap();
        assert!((d - PI).abs() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn compose_inverse_round_trip(pose in arb_pose()) {
            let id = pose.compose(&pose.inverse());
            prop_assert!((id.rotation.quaternion().coords.abs() - Quaternion::<f64>::identity().coords).norm() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
            prop_assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn project_back_project_round_trip(
            x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.01f64..10.0,
        ) {
            let point = Vector3::new(x, y, z);
            let back = project(&point, &k64()).unwrap().back_project();
            prop_assert!((back - point).norm() < 1e-9);
        }

        #[test]
        fn quat_distance_metric_properties(a in arb_pose(), b in arb_pose()) {
            let (qa, qb) = (a.rotation.into_inner(), b.rotation.into_inner());
            let dab = quat_distance(&qa, &qb).unwrap();
            let dba = quat_distance(&qb, &qa).unwrap();
            prop_assert!(dab >= 0.0 && dab <= PI + 1e-12);
            prop_assert_eq!(dab, dba);
        }
    }
}
