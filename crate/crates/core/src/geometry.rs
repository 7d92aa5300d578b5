//! Minimal SO(3) helpers: skew operator, exponential map and a rotation
//! newtype stored as a full direction-cosine matrix.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;

/// Below this angle the exponential map switches to its Taylor expansion.
const SMALL_ANGLE: f64 = 1e-7;

/// Skew-symmetric matrix `v^×` such that `v^× w = v × w`.
pub fn cross_matrix(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Attitude of a body frame relative to the common frame, `C_ab`.
///
/// Always a proper orthonormal matrix when built through [`so3_exp`],
/// [`Rotation::identity`] or [`compose`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and handedness to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        (ortho <= 1e-9 && (m.determinant() - 1.0).abs() <= 1e-9).then_some(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Resolves a common-frame vector in the body frame (`C^T v`).
    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }

    /// Rotation vector `phi` with `so3_exp(phi) == self`, for angles below π.
    pub fn log(&self) -> Vec3 {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let angle = cos.acos();
        let vee = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        if angle < SMALL_ANGLE {
            return vee * 0.5;
        }
        if std::f64::consts::PI - angle < 1e-6 {
            // Near π the antisymmetric part vanishes; recover the axis from
            // the symmetric part instead.
            let b = ((m + m.transpose()) * 0.5 - Matrix3::identity() * cos) / (1.0 - cos);
            let col = (0..3)
                .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
                .unwrap_or(0);
            let mut axis = b.column(col).into_owned();
            axis /= axis.norm();
            if axis.dot(&vee) < 0.0 {
                axis = -axis;
            }
            return axis * angle;
        }
        vee * (angle / (2.0 * angle.sin()))
    }

    /// Angle in radians of the rotation taking `self` onto `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        compose(&self.transpose(), other).log().norm()
    }

    /// Re-orthonormalizes via the polar factor; used after long chains of
    /// floating-point compositions.
    pub fn normalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self(r)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Exponential map from a rotation vector to a rotation (Rodrigues).
pub fn so3_exp(phi: &Vec3) -> Rotation {
    let angle = phi.norm();
    let k = cross_matrix(phi);
    let k2 = k * k;
    let (a, b) = if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

pub fn compose(a: &Rotation, b: &Rotation) -> Rotation {
    Rotation(a.0 * b.0)
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        compose(&self, &rhs)
    }
}
