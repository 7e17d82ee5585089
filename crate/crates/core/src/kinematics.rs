//! Serial-chain forward kinematics and the end-effector-frame Jacobian.
//!
//! Chains use the standard (distal) Denavit–Hartenberg convention: joint `i`
//! contributes `RotZ(θᵢ + offsetᵢ) · TransZ(dᵢ) · TransX(aᵢ) · RotX(αᵢ)`.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{se3_log, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub fn new(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
        }
    }

    fn transform(&self, q: f64) -> Pose {
        let theta = q + self.theta_offset;
        let rz = Pose::from_rpy(0.0, 0.0, theta, Vector3::zeros());
        let link = Pose::from_rpy(self.alpha, 0.0, 0.0, Vector3::new(self.a, 0.0, self.d));
        // TransZ(d)·TransX(a) is the single translation (a, 0, d).
        rz.compose(&link)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub rows: Vec<DhRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub velocity_limits: Vec<f64>,
    /// Pose of the chain's base in the world frame.
    pub base: Pose,
}

/// Joint positions (rad) and velocities (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub positions: DVector<f64>,
    pub velocities: DVector<f64>,
}

impl JointState {
    pub fn at_rest(positions: DVector<f64>) -> Self {
        let n = positions.len();
        Self {
            positions,
            velocities: DVector::zeros(n),
        }
    }
}

impl KinematicChain {
    pub fn new(rows: Vec<DhRow>, lower: Vec<f64>, upper: Vec<f64>, velocity_limits: Vec<f64>) -> Result<Self> {
        let chain = Self {
            rows,
            lower,
            upper,
            velocity_limits,
            base: Pose::identity(),
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Planar chain with unlimited joints; used by tests and examples.
    pub fn planar(lengths: &[f64]) -> Self {
        let n = lengths.len();
        Self {
            rows: lengths.iter().map(|&a| DhRow::new(a, 0.0, 0.0, 0.0)).collect(),
            lower: vec![-std::f64::consts::PI * 2.0; n],
            upper: vec![std::f64::consts::PI * 2.0; n],
            velocity_limits: vec![10.0; n],
            base: Pose::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        if n < 2 {
            return Err(Error::Config(format!("chain needs at least 2 joints, got {n}")));
        }
        if self.lower.len() != n || self.upper.len() != n || self.velocity_limits.len() != n {
            return Err(Error::Config(format!(
                "chain limits must have {n} entries (lower {}, upper {}, velocity {})",
                self.lower.len(),
                self.upper.len(),
                self.velocity_limits.len()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!("joint {i}: lower limit {lo} not below upper {hi}")));
            }
        }
        if self.velocity_limits.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("velocity limits must be positive".into()));
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.rows.len()
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::dims(format!("q has {} entries, chain has {} joints", q.len(), self.dof())));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::dims("q contains non-finite entries"));
        }
        Ok(())
    }

    /// Frames `0..=n` in the world frame; frame 0 is the base.
    fn frames(&self, q: &DVector<f64>) -> Vec<Pose> {
        let mut frames = Vec::with_capacity(self.dof() + 1);
        let mut current = self.base;
        frames.push(current);
        for (row, &qi) in self.rows.iter().zip(q.iter()) {
            current = current.compose(&row.transform(qi));
            frames.push(current);
        }
        frames
    }

    /// End-effector pose in the world frame.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Pose> {
        self.check_q(q)?;
        Ok(*self.frames(q).last().expect("chain has joints"))
    }

    /// `6 × n` Jacobian mapping joint velocities to the end-effector twist
    /// expressed in the end-effector frame (linear rows first).
    pub fn robot_jacobian(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_q(q)?;
        let frames = self.frames(q);
        let ee = frames[self.dof()];
        let r_t = ee.rotation_matrix().transpose();
        let mut jac = DMatrix::zeros(6, self.dof());
        for i in 0..self.dof() {
            let axis = frames[i].rotation * Vector3::z();
            let lever = ee.translation - frames[i].translation;
            let lin = r_t * axis.cross(&lever);
            let ang = r_t * axis;
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
        }
        Ok(jac)
    }

    pub fn clamp_to_limits(&self, q: &mut DVector<f64>) -> bool {
        let mut hit = false;
        for i in 0..self.dof() {
            let clamped = q[i].clamp(self.lower[i], self.upper[i]);
            if clamped != q[i] {
                hit = true;
                q[i] = clamped;
            }
        }
        hit
    }

    pub fn within_limits(&self, q: &DVector<f64>) -> bool {
        q.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// Iterative damped least-squares IK for a full end-effector pose.
    ///
    /// Returns the joint vector, or `None` if the residual is still above
    /// `tol` after `max_iter` iterations.
    pub fn solve_pose(&self, target: &Pose, seed: &DVector<f64>, tol: f64, max_iter: usize) -> Result<Option<DVector<f64>>> {
        self.check_q(seed)?;
        let mut q = seed.clone();
        let damping = 1e-3;
        for _ in 0..max_iter {
            let ee = self.forward_kinematics(&q)?;
            // Body-frame error twist taking the current pose to the target.
            let err: Vector6<f64> = se3_log(&ee.inverse().compose(target));
            if err.norm() < tol {
                return Ok(Some(q));
            }
            let jac = self.robot_jacobian(&q)?;
            let jjt = &jac * jac.transpose() + DMatrix::identity(6, 6) * damping * damping;
            let Some(inv) = jjt.try_inverse() else {
                return Ok(None);
            };
            let step = jac.transpose() * inv * DVector::from_column_slice(err.as_slice());
            let scale = (0.2 / step.amax()).min(1.0);
            q += step * scale;
            self.clamp_to_limits(&mut q);
        }
        Ok(None)
    }
}
