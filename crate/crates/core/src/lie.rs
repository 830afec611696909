//! Rigid body motions: SE(3) group elements, se(3) twists, and the exp/log maps
//! between them.
//!
//! Twists are ordered translation first, rotation second: `[v, ω]`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Below this angle the exponential uses its Taylor expansion.
const EXP_SERIES_ANGLE: f64 = 1e-8;
/// Below this angle the `(θ - sin θ)/θ³` and `V⁻¹` coefficients use series.
const COEFF_SERIES_ANGLE: f64 = 1e-2;
/// Within this distance of π the logarithm recovers the axis from `R + Rᵀ`.
const LOG_NEAR_PI: f64 = 1e-3;

/// Skew-symmetric matrix of `w`, so that `hat(w) * x = w × x`.
#[rustfmt::skip]
pub fn hat<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(
        z,    -w.z,  w.y,
        w.z,   z,   -w.x,
       -w.y,   w.x,  z,
    )
}

/// Inverse of [`hat`]; reads the skew part of `m`.
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Element of se(3): `[translation part; rotation part]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Twist<T: Real>(pub Vector6<T>);

impl<T: Real> Twist<T> {
    pub fn new(translation: Vector3<T>, rotation: Vector3<T>) -> Self {
        Twist(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn translation(&self) -> Vector3<T> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn rotation(&self) -> Vector3<T> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        self.0.norm()
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Se3<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Se3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Se3<T> {
    pub fn identity() -> Self {
        Se3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validating constructor: `RᵀR = I` and `det R = 1` within tolerance.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let pose = Se3 {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Se3 {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Se3 {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Builds the pose from a row-major homogeneous 4×4 matrix.
    pub fn from_matrix(m: &Matrix4<T>) -> Result<Self> {
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Se3::new(rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite pose entries"));
        }
        let tol = T::rotation_tolerance();
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if gram.amax() > tol {
            return Err(Error::invalid("rotation is not orthonormal"));
        }
        if (self.rotation.determinant() - T::one()).abs() > tol {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn quaternion(&self) -> UnitQuaternion<T> {
        nearest_quaternion(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// `self⁻¹ · other`, the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Se3<T>) -> Se3<T> {
        self.inverse() * *other
    }

    pub fn exp(xi: &Twist<T>) -> Result<Self> {
        se3_exp(xi)
    }

    pub fn log(&self) -> Twist<T> {
        se3_log(self)
    }

    /// Re-orthonormalizes the rotation (polar projection through a quaternion).
    pub fn renormalized(&self) -> Self {
        let q = nearest_quaternion(&self.rotation);
        Se3 {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation,
        }
    }

    pub fn cast<U: Real>(&self) -> Se3<U> {
        Se3 {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

impl<T: Real> Mul for Se3<T> {
    type Output = Se3<T>;

    fn mul(self, rhs: Se3<T>) -> Se3<T> {
        Se3 {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl<'a, T: Real> Mul<&'a Se3<T>> for &'a Se3<T> {
    type Output = Se3<T>;

    fn mul(self, rhs: &Se3<T>) -> Se3<T> {
        *self * *rhs
    }
}

/// Coefficients `(sin θ/θ, (1-cos θ)/θ², (θ - sin θ)/θ³)` for squared angle `theta2`.
fn rodrigues_coefficients<T: Real>(theta2: T) -> (T, T, T) {
    let theta = theta2.sqrt();
    if theta < T::lit(EXP_SERIES_ANGLE) {
        let a = T::one() - theta2 / T::lit(6.0);
        let b = T::lit(0.5) - theta2 / T::lit(24.0);
        let c = T::lit(1.0 / 6.0) - theta2 / T::lit(120.0);
        return (a, b, c);
    }
    let s = theta.sin();
    let a = s / theta;
    let half_sin = (theta * T::lit(0.5)).sin();
    let b = T::lit(2.0) * half_sin * half_sin / theta2;
    let c = if theta < T::lit(COEFF_SERIES_ANGLE) {
        let t4 = theta2 * theta2;
        T::lit(1.0 / 6.0) - theta2 / T::lit(120.0) + t4 / T::lit(5040.0)
            - t4 * theta2 / T::lit(362_880.0)
    } else {
        (theta - s) / (theta2 * theta)
    };
    (a, b, c)
}

/// Closest unit quaternion to a nearly orthonormal matrix. The iterative
/// projection is seeded with the closed-form extraction so half-turns converge.
fn nearest_quaternion<T: Real>(m: &Matrix3<T>) -> UnitQuaternion<T> {
    let seed = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    let seed = UnitQuaternion::new_normalize(seed.into_inner());
    UnitQuaternion::from_matrix_eps(m, T::default_epsilon(), 0, seed)
}

/// SO(3) exponential of an axis-angle vector.
pub fn so3_exp<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let (a, b, _) = rodrigues_coefficients(w.norm_squared());
    let k = hat(w);
    Matrix3::identity() + k * a + k * k * b
}

/// SO(3) logarithm; angle in `[0, π]`.
pub fn so3_log<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    let skew = vee(r);
    let sin_theta = skew.norm();
    let cos_theta = ((r.trace() - T::one()) * half).clamp(-T::one(), T::one());
    let theta = sin_theta.atan2(cos_theta);

    if theta < T::lit(EXP_SERIES_ANGLE) {
        return skew * (T::one() + theta * theta / T::lit(6.0));
    }
    if T::pi() - theta < T::lit(LOG_NEAR_PI) {
        // sin θ is unreliable here; recover the axis from the symmetric part:
        // (R + Rᵀ)/2 = cos θ I + (1 - cos θ) n nᵀ.
        let sym = (r + r.transpose()) * half;
        let one_minus_cos = T::one() - cos_theta;
        let outer = (sym - Matrix3::identity() * cos_theta) / one_minus_cos;
        let mut best = 0;
        for i in 1..3 {
            if outer[(i, i)] > outer[(best, best)] {
                best = i;
            }
        }
        let mut axis = outer.column(best).into_owned();
        let norm = axis.norm();
        axis /= norm;
        if axis.dot(&skew) < T::zero() {
            axis = -axis;
        }
        return axis * theta;
    }
    skew * (theta / sin_theta)
}

/// The left Jacobian `V` mapping twist translation to group translation.
fn left_jacobian<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let (_, b, c) = rodrigues_coefficients(w.norm_squared());
    let k = hat(w);
    Matrix3::identity() + k * b + k * k * c
}

fn left_jacobian_inverse<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let d = if theta < T::lit(COEFF_SERIES_ANGLE) {
        T::lit(1.0 / 12.0) + theta2 / T::lit(720.0) + theta2 * theta2 / T::lit(30_240.0)
    } else {
        let half = theta * T::lit(0.5);
        (T::one() - half * half.cos() / half.sin()) / theta2
    };
    let k = hat(w);
    Matrix3::identity() - k * T::lit(0.5) + k * k * d
}

/// Exponential map se(3) → SE(3).
pub fn se3_exp<T: Real>(xi: &Twist<T>) -> Result<Se3<T>> {
    if !xi.is_finite() {
        return Err(Error::invalid("non-finite twist"));
    }
    let w = xi.rotation();
    Ok(Se3 {
        rotation: so3_exp(&w),
        translation: left_jacobian(&w) * xi.translation(),
    })
}

/// Logarithm map SE(3) → se(3), rotation angle in `[0, π]`.
pub fn se3_log<T: Real>(pose: &Se3<T>) -> Twist<T> {
    let w = so3_log(&pose.rotation);
    let v = left_jacobian_inverse(&w) * pose.translation;
    Twist::new(v, w)
}
