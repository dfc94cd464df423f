//! SO(3)/SE(3) primitives shared by every stage of the pipeline.
//!
//! Rotations are stored as unit quaternions; matrices are produced on demand.
//! Tangent-space perturbations follow the right convention throughout:
//! `R <- R * exp(dphi)` and `t <- t + R * dt`.

use nalgebra::{Matrix3, Matrix6, Rotation3, Unit, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this angle the closed-form expressions switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
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
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a rotation matrix, re-orthonormalizing through the quaternion.
    pub fn from_matrix(rotation: &Mat3, translation: Vec3) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
        Self::new(q, translation)
    }

    /// Pose from a rotation vector and a translation.
    pub fn from_parts(rotation_vector: &Vec3, translation: Vec3) -> Self {
        Self::new(quat_exp(rotation_vector), translation)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = renormalize(self.rotation * other.rotation);
        Pose {
            rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Relative transform `self^-1 * other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_angle(&self) -> f64 {
        so3_log_quat(&self.rotation).norm()
    }

    /// Right perturbation `R exp(dphi)`, `t + R dt` with `delta = [dphi; dt]`.
    pub fn retract(&self, dphi: &Vec3, dt: &Vec3) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * quat_exp(dphi)),
            translation: self.translation + self.rotation * dt,
        }
    }

    /// Tangent-space error `[log(R); t]` used by tests and evaluation.
    pub fn log_split(&self) -> (Vec3, Vec3) {
        (so3_log_quat(&self.rotation), self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(theta: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = skew(theta);
    let (a, b) = if angle < SMALL_ANGLE {
        (1.0 - angle2 / 6.0, 0.5 - angle2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / angle2)
    };
    Mat3::identity() + k * a + k * k * b
}

pub fn quat_exp(theta: &Vec3) -> UnitQuaternion<f64> {
    let angle = theta.norm();
    if angle < SMALL_ANGLE {
        let half = theta * 0.5;
        UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            1.0 - angle * angle / 8.0,
            half.x,
            half.y,
            half.z,
        ))
    } else {
        UnitQuaternion::from_axis_angle(&Unit::new_unchecked(theta / angle), angle)
    }
}

/// Rotation vector of a unit quaternion, always with norm in `[0, pi]`.
pub fn so3_log_quat(q: &UnitQuaternion<f64>) -> Vec3 {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < SMALL_ANGLE {
        // atan2(n, w) / n for small n
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

pub fn so3_log(r: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    so3_log_quat(&q)
}

/// Right Jacobian of SO(3): `omega = J_r(theta) * theta_dot`.
pub fn right_jacobian(theta: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = skew(theta);
    if angle < SMALL_ANGLE {
        return Mat3::identity() - k * 0.5 + k * k / 6.0;
    }
    let (a, b) = jr_coefficients(angle);
    Mat3::identity() - k * a + k * k * b
}

pub fn right_jacobian_inv(theta: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = skew(theta);
    let c = if angle < 1e-4 {
        1.0 / 12.0 + angle2 / 720.0
    } else {
        1.0 / angle2 - (1.0 + angle.cos()) / (2.0 * angle * angle.sin())
    };
    Mat3::identity() + k * 0.5 + k * k * c
}

/// `(1 - cos a) / a^2` and `(a - sin a) / a^3`.
fn jr_coefficients(angle: f64) -> (f64, f64) {
    if angle < 1e-2 {
        let a2 = angle * angle;
        (
            0.5 - a2 / 24.0 + a2 * a2 / 720.0,
            1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0,
        )
    } else {
        let a2 = angle * angle;
        ((1.0 - angle.cos()) / a2, (angle - angle.sin()) / (a2 * angle))
    }
}

/// Derivative of `J_r(theta) * v` with respect to `theta`.
pub fn right_jacobian_product_derivative(theta: &Vec3, v: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let (a, b) = jr_coefficients(angle);
    // da/dphi / phi and db/dphi / phi
    let (da, db) = if angle < 1e-2 {
        (
            -1.0 / 12.0 + angle2 / 180.0 - angle2 * angle2 / 6720.0,
            -1.0 / 60.0 + angle2 / 1260.0 - angle2 * angle2 / 60480.0,
        )
    } else {
        let (s, c) = angle.sin_cos();
        (
            (angle * s - 2.0 * (1.0 - c)) / (angle2 * angle2),
            ((1.0 - c) * angle - 3.0 * (angle - s)) / (angle2 * angle2 * angle),
        )
    };
    let txv = theta.cross(v);
    let txtxv = theta.cross(&txv);
    let tdv = theta.dot(v);
    // d/dtheta of -a (theta x v)
    let first = -(txv * theta.transpose()) * da + skew(v) * a;
    // d/dtheta of b theta x (theta x v) = b (theta (theta.v) - v |theta|^2)
    let second = (theta * v.transpose() + Mat3::identity() * tdv - v * theta.transpose() * 2.0) * b
        + txtxv * theta.transpose() * db;
    first + second
}

/// Symmetric-part projection.
pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize6(m: &Mat6) -> Mat6 {
    (m + m.transpose()) * 0.5
}

/// Checks the covariance invariants: symmetry to 1e-12 and eigenvalues >= -1e-10.
pub fn is_covariance3(m: &Mat3) -> bool {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .all(|&e| e >= -1e-10 * scale)
}

pub fn is_covariance6(m: &Mat6) -> bool {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    symmetrize6(m)
        .symmetric_eigenvalues()
        .iter()
        .all(|&e| e >= -1e-10 * scale)
}
