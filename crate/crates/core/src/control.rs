//! Classical image-based visual servoing: point-feature interaction matrix,
//! Jacobian composition, damped least-squares inversion and the control laws.

use nalgebra::{DMatrix, DVector, Matrix6};

use crate::error::{Error, Result};
use crate::geometry::MIN_DEPTH;

/// Stacked normalized point coordinates `(x₁, y₁, …, x_P, y_P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(DVector<f64>);

impl FeatureVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.len() % 2 != 0 || values.is_empty() {
            return Err(Error::dims(format!("feature vector length {} is not 2P", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::dims("feature vector has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(DVector::from_iterator(
            points.len() * 2,
            points.iter().flat_map(|&(x, y)| [x, y]),
        ))
    }

    pub fn points(&self) -> usize {
        self.0.len() / 2
    }

    pub fn point(&self, p: usize) -> (f64, f64) {
        (self.0[2 * p], self.0[2 * p + 1])
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs_diff(&self, other: &FeatureVector) -> f64 {
        (&self.0 - &other.0).amax()
    }
}

/// Per-point depths in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthVector(DVector<f64>);

impl DepthVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|z| !(**z > MIN_DEPTH)) {
            return Err(Error::NonPositiveDepth { depth: bad });
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    /// Convergence gain λ (1/s).
    pub gain: f64,
    /// Damping σ of the least-squares inverse.
    pub damping: f64,
    /// Per-joint command bound (rad/s).
    pub clamp: f64,
    /// Control period T (s).
    pub period: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            damping: 0.01,
            clamp: 1.5,
            period: 1.0 / 30.0,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) {
            return Err(Error::Config(format!("control.gain must be > 0, got {}", self.gain)));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config(format!("control.damping must be >= 0, got {}", self.damping)));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::Config(format!("control.clamp must be > 0, got {}", self.clamp)));
        }
        if !(self.period > 0.0) {
            return Err(Error::Config(format!("control.period must be > 0, got {}", self.period)));
        }
        Ok(())
    }
}

/// Writes the two interaction-matrix rows of one point into `rows`
/// (`[row_x; row_y]`, each of length 6).
pub fn point_rows(x: f64, y: f64, z: f64) -> [[f64; 6]; 2] {
    let iz = 1.0 / z;
    [
        [-iz, 0.0, x * iz, x * y, -(1.0 + x * x), y],
        [0.0, -iz, y * iz, 1.0 + y * y, -x * y, -x],
    ]
}

/// `f × 6` interaction matrix of point features, in feature order.
pub fn interaction_matrix(s: &FeatureVector, z: &DepthVector) -> Result<DMatrix<f64>> {
    if z.len() != s.points() {
        return Err(Error::dims(format!("{} depths for {} points", z.len(), s.points())));
    }
    let mut l = DMatrix::zeros(s.len(), 6);
    for p in 0..s.points() {
        let (x, y) = s.point(p);
        let rows = point_rows(x, y, z.as_slice()[p]);
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                l[(2 * p + r, c)] = *v;
            }
        }
    }
    Ok(l)
}

/// `Ĵ = L · V · J_r`.
pub fn compose_jacobian(l: &DMatrix<f64>, v: &Matrix6<f64>, jr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if l.ncols() != 6 || jr.nrows() != 6 {
        return Err(Error::dims(format!(
            "cannot compose {}x{} · 6x6 · {}x{}",
            l.nrows(),
            l.ncols(),
            jr.nrows(),
            jr.ncols()
        )));
    }
    let vj = v * jr;
    Ok(l * vj)
}

/// Damped least-squares inverse `(JᵀJ + σ²I)⁻¹ Jᵀ`.
///
/// With `σ = 0` this is the Moore–Penrose inverse of a full-column-rank `J`;
/// a rank-deficient `JᵀJ` (reciprocal condition below 1e-12) is rejected.
pub fn damped_pinv(j: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("damping must be >= 0, got {sigma}")));
    }
    let n = j.ncols();
    let jt = j.transpose();
    let mut normal = &jt * j;
    if sigma == 0.0 {
        let eig = normal.clone().symmetric_eigenvalues();
        let max = eig.amax();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let rcond = if max > 0.0 { min / max } else { 0.0 };
        if !(rcond >= 1e-12) {
            return Err(Error::SingularMatrix { rcond });
        }
    } else {
        for i in 0..n {
            normal[(i, i)] += sigma * sigma;
        }
    }
    let chol = normal
        .cholesky()
        .ok_or(Error::SingularMatrix { rcond: 0.0 })?;
    Ok(chol.solve(&jt))
}

fn feature_error(s: &FeatureVector, s_star: &FeatureVector, j: &DMatrix<f64>) -> Result<DVector<f64>> {
    if s.len() != s_star.len() || j.nrows() != s.len() {
        return Err(Error::dims(format!(
            "features {} / {} vs Jacobian with {} rows",
            s.len(),
            s_star.len(),
            j.nrows()
        )));
    }
    Ok(s.as_vector() - s_star.as_vector())
}

/// Unclamped VS law `−λ Ĵ⁺_σ (s − s*)`.
pub fn vs_command_unclamped(
    s: &FeatureVector,
    s_star: &FeatureVector,
    j: &DMatrix<f64>,
    cfg: &ControlConfig,
) -> Result<DVector<f64>> {
    let e = feature_error(s, s_star, j)?;
    Ok(damped_pinv(j, cfg.damping)? * e * (-cfg.gain))
}

/// VS law with each joint command clamped to `±cfg.clamp`.
pub fn vs_command(s: &FeatureVector, s_star: &FeatureVector, j: &DMatrix<f64>, cfg: &ControlConfig) -> Result<DVector<f64>> {
    let mut qdot = vs_command_unclamped(s, s_star, j, cfg)?;
    qdot.iter_mut().for_each(|v| *v = v.clamp(-cfg.clamp, cfg.clamp));
    Ok(qdot)
}

/// Moore–Penrose inverse of a full-row-rank matrix.
fn right_pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let aat = a * a.transpose();
    let eig = aat.clone().symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if !(rcond >= 1e-12) {
        return Err(Error::SingularMatrix { rcond });
    }
    let inv = aat.cholesky().ok_or(Error::SingularMatrix { rcond })?.inverse();
    Ok(a.transpose() * inv)
}

/// Position-only VS executed in the null space of a constant-orientation task.
///
/// `j_ori` is the `3 × n` angular block of the camera Jacobian. The command is
/// `q̇ = −λ N (Ĵ N)⁺_σ (s − s*)` with `N = I − J_ori⁺ J_ori`, so the camera
/// angular velocity `J_ori q̇` vanishes. The clamp scales the whole vector
/// uniformly, which keeps it inside the null space.
pub fn nullspace_command(
    s_pos: &FeatureVector,
    s_star_pos: &FeatureVector,
    j: &DMatrix<f64>,
    j_ori: &DMatrix<f64>,
    cfg: &ControlConfig,
) -> Result<DVector<f64>> {
    let e = feature_error(s_pos, s_star_pos, j)?;
    let n = j.ncols();
    if j_ori.nrows() != 3 || j_ori.ncols() != n {
        return Err(Error::dims(format!(
            "orientation Jacobian is {}x{}, expected 3x{n}",
            j_ori.nrows(),
            j_ori.ncols()
        )));
    }
    let projector = DMatrix::identity(n, n) - right_pinv(j_ori)? * j_ori;
    let jn = j * &projector;
    let mut qdot = &projector * (damped_pinv(&jn, cfg.damping)? * e) * (-cfg.gain);
    let peak = qdot.amax();
    if peak > cfg.clamp {
        qdot *= cfg.clamp / peak;
    }
    Ok(qdot)
}
