//! SO(3) / SE(3) primitives: rotations, rigid poses, and the Lie-group maps
//! the calibration math is built on.
//!
//! Pose convention: a `Pose` maps coordinates expressed in a reference frame
//! into the frame named by its tag. An end-effector pose `E` is therefore
//! "end-effector from base" and a camera pose `P` is "camera from world",
//! so relative motions compose as `B * A^-1`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Below this angle the log map uses its first-order limit.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Within this distance of π the log map extracts the axis from the diagonal.
pub const NEAR_PI: f64 = 1e-6;
/// Default eigenvalue floor for [`inv_sqrt_psd`].
pub const DEFAULT_MIN_EIGENVALUE: f64 = 1e-12;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation: |R^T R - I|_F = {orthogonality:.3e}, det = {det:.12}")]
    NotARotation { orthogonality: f64, det: f64 },
    #[error("matrix is degenerate: smallest eigenvalue {min_eigenvalue:.3e} <= {floor:.3e}")]
    DegenerateMatrix { min_eigenvalue: f64, floor: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("homogeneous matrix has invalid bottom row {0:?}")]
    NotHomogeneous([f64; 4]),
}

/// Element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps `m` after checking it is orthonormal with determinant +1.
    pub fn from_matrix(m: Mat3) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let orthogonality = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if orthogonality >= ORTHONORMAL_TOL || (det - 1.0).abs() >= ORTHONORMAL_TOL {
            return Err(GeometryError::NotARotation { orthogonality, det });
        }
        Ok(Rotation(m))
    }

    /// Projects an approximately orthonormal matrix onto SO(3) using the
    /// polar decomposition `m = U S V^T  ->  U V^T` (with a reflection guard).
    pub fn from_matrix_normalized(m: Mat3) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Rotation(project_to_so3(&m)))
    }

    /// Wraps `m` without checking. Callers guarantee it is a rotation.
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn from_axis_angle(v: &Vec3) -> Self {
        exp_map(&AxisAngle(*v))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        log_map(self).angle()
    }

    /// Geodesic distance to `other` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Axis scaled by angle; the so(3) coordinates of a rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub fn zero() -> Self {
        AxisAngle(Vec3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }
}

/// Frame tag carried by a pose; names the target frame of the transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    RobotBase,
    EndEffector,
    CameraModel,
    CameraMetric,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Frame::RobotBase => "robot_base",
            Frame::EndEffector => "end_effector",
            Frame::CameraModel => "camera_model",
            Frame::CameraMetric => "camera_metric",
        };
        f.write_str(s)
    }
}

/// Rigid transform in SE(3) with a frame tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub frame: Frame,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3, frame: Frame) -> Self {
        Pose {
            rotation,
            translation,
            frame,
        }
    }

    pub fn identity(frame: Frame) -> Self {
        Pose::new(Rotation::identity(), Vec3::zeros(), frame)
    }

    /// Builds a pose from a 4×4 homogeneous matrix, re-orthonormalizing the
    /// rotation block.
    pub fn from_homogeneous(m: &Mat4, frame: Frame) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom[0].abs() > 1e-9
            || bottom[1].abs() > 1e-9
            || bottom[2].abs() > 1e-9
            || (bottom[3] - 1.0).abs() > 1e-9
        {
            return Err(GeometryError::NotHomogeneous(bottom));
        }
        let rot = Rotation::from_matrix_normalized(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        if t.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Pose::new(rot, t, frame))
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt.rotate(&self.translation)), self.frame)
    }

    /// `self ∘ rhs`: applies `rhs` first. Keeps the tag of `self`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
            self.frame,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// Same rotation, translation multiplied by `scale`.
    pub fn with_scaled_translation(&self, scale: f64) -> Pose {
        Pose::new(self.rotation, self.translation * scale, self.frame)
    }

    pub fn with_frame(mut self, frame: Frame) -> Pose {
        self.frame = frame;
        self
    }

    /// Rotation angle (rad) and translation distance to `other`.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        (
            self.rotation.angle_to(&other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Logarithm of a rotation as an axis-angle vector with norm in [0, π].
pub fn log_map(r: &Rotation) -> AxisAngle {
    let m = r.matrix();
    let s = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    // ω from (cos, sin) pair: arccos((tr - 1) / 2) loses precision near 0.
    let cos_w = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_w = 0.5 * s.norm();
    let w = sin_w.atan2(cos_w);

    if w < SMALL_ANGLE {
        return AxisAngle(0.5 * s);
    }
    if std::f64::consts::PI - w < NEAR_PI {
        return AxisAngle(near_pi_axis(m, &s, cos_w) * w);
    }
    AxisAngle(s * (w / (2.0 * w.sin())))
}

/// Unit rotation axis for angles near π, from the symmetric part
/// `(R + R^T)/2 - cos ω I = (1 - cos ω) a a^T`.
fn near_pi_axis(m: &Mat3, s: &Vec3, cos_w: f64) -> Vec3 {
    let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * cos_w;
    let k = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis: Vec3 = sym.column(k).into_owned();
    axis /= axis.norm();
    // The antisymmetric part still carries the sign (2 sin ω a) when nonzero.
    if axis.dot(s) < 0.0 {
        axis = -axis;
    }
    axis
}

/// Rodrigues' formula.
pub fn exp_map(v: &AxisAngle) -> Rotation {
    let theta2 = v.0.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&v.0);
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Mat3::identity() + k * a + k * k * b)
}

/// `A^(-1/2)` for a symmetric positive-definite 3×3 matrix via symmetric
/// eigendecomposition.
pub fn inv_sqrt_psd(a: &Mat3, min_eigenvalue: f64) -> Result<Mat3, GeometryError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lo = eig.eigenvalues.min();
    if lo <= min_eigenvalue {
        return Err(GeometryError::DegenerateMatrix {
            min_eigenvalue: lo,
            floor: min_eigenvalue,
        });
    }
    let d = Mat3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `T` with `b = T ∘ a`, i.e. `b ∘ a^-1`.
pub fn relative_transform(a: &Pose, b: &Pose) -> Pose {
    b.compose(&a.inverse())
}

/// Closest rotation in Frobenius norm.
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Mat3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}
