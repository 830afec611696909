//! Anisotropic 3D Gaussian primitives and the scene container.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One anisotropic primitive. `scales` are standard deviations, so the
/// covariance is `O diag(s)² Oᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D<T: Real> {
    pub center: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
    pub scales: Vector3<T>,
    pub opacity: T,
    pub color: Vector3<T>,
    /// Largest observed focal-over-depth ratio, pixels per meter. Zero until observed.
    pub sampling_frequency: T,
}

/// Flips a quaternion into the `w ≥ 0` hemisphere.
pub fn canonical_quaternion<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    if q.w < T::zero() {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl<T: Real> Gaussian3D<T> {
    pub fn new(
        center: Vector3<T>,
        orientation: UnitQuaternion<T>,
        scales: Vector3<T>,
        opacity: T,
        color: Vector3<T>,
    ) -> Result<Self> {
        let g = Gaussian3D {
            center,
            orientation: canonical_quaternion(orientation),
            scales,
            opacity,
            color,
            sampling_frequency: T::zero(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(center: Vector3<T>, scale: T, opacity: T, color: Vector3<T>) -> Result<Self> {
        Self::new(
            center,
            UnitQuaternion::identity(),
            Vector3::repeat(scale),
            opacity,
            color,
        )
    }

    /// Builds the orientation from raw `(w, x, y, z)` components, which must
    /// already have unit norm within 1e-9.
    pub fn quaternion_from_wxyz(wxyz: [T; 4]) -> Result<UnitQuaternion<T>> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        if (q.norm() - T::one()).abs() > T::rotation_tolerance() {
            return Err(Error::invalid("quaternion is not unit norm"));
        }
        let unit = if (q.norm() - T::one()).abs() <= T::lit(4.0) * T::default_epsilon() {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(canonical_quaternion(unit))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .center
            .iter()
            .chain(self.scales.iter())
            .chain(self.color.iter())
            .all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.sampling_frequency.is_finite();
        if !finite {
            return Err(Error::invalid("non-finite Gaussian parameter"));
        }
        if self.scales.iter().any(|s| *s <= T::zero()) {
            return Err(Error::invalid("Gaussian scales must be strictly positive"));
        }
        if self.opacity < T::zero() || self.opacity > T::one() {
            return Err(Error::invalid("opacity outside [0, 1]"));
        }
        if self.sampling_frequency < T::zero() {
            return Err(Error::invalid("negative sampling frequency"));
        }
        if (self.orientation.as_ref().norm() - T::one()).abs() > T::rotation_tolerance() {
            return Err(Error::invalid("orientation is not unit norm"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<T> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    pub fn covariance(&self) -> Matrix3<T> {
        let o = self.rotation();
        let s2 = self.scales.component_mul(&self.scales);
        o * Matrix3::from_diagonal(&s2) * o.transpose()
    }

    /// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
    pub fn eval(&self, x: &Vector3<T>) -> T {
        eval_gaussian3d(self, x)
    }
}

/// Evaluates the primitive in its own principal frame, avoiding an explicit
/// covariance inverse.
pub fn eval_gaussian3d<T: Real>(g: &Gaussian3D<T>, x: &Vector3<T>) -> T {
    let local = g.orientation.inverse_transform_vector(&(x - g.center));
    let m = local.component_div(&g.scales).norm_squared();
    (-T::lit(0.5) * m).exp()
}

/// Ordered primitives plus the color composited behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T: Real> {
    pub gaussians: Vec<Gaussian3D<T>>,
    pub background_color: Vector3<T>,
}

impl<T: Real> Scene<T> {
    pub fn new(gaussians: Vec<Gaussian3D<T>>, background_color: Vector3<T>) -> Self {
        Scene {
            gaussians,
            background_color,
        }
    }

    pub fn empty(background_color: Vector3<T>) -> Self {
        Scene::new(Vec::new(), background_color)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::invalid(format!("gaussian {i}: {e}")))?;
        }
        if self
            .background_color
            .iter()
            .any(|c| !c.is_finite() || *c < T::zero() || *c > T::one())
        {
            return Err(Error::invalid("background color outside [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian3D<f64> {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        Gaussian3D::new(
            Vector3::new(rng.random(), rng.random(), rng.random()),
            q,
            Vector3::new(
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
            ),
            0.7,
            Vector3::new(0.2, 0.3, 0.4),
        )
        .unwrap()
    }

    #[test]
    fn peak_at_center() {
        let g = Gaussian3D::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.3, 0.5, Vector3::zeros())
            .unwrap();
        assert_eq!(g.eval(&g.center), 1.0);
    }

    #[test]
    fn one_sigma_isotropic() {
        let g = Gaussian3D::isotropic(Vector3::zeros(), 1.0, 1.0, Vector3::zeros()).unwrap();
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            assert_relative_eq!(g.eval(&axis), (-0.5f64).exp(), epsilon = 1e-15);
        }
        assert_relative_eq!(g.eval(&Vector3::x()), 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn matches_explicit_covariance_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let x = Vector3::new(rng.random(), rng.random(), rng.random());
            let d = x - g.center;
            let sigma = g.covariance();
            assert_relative_eq!(sigma, sigma.transpose(), epsilon = 1e-14);
            let inv = sigma.try_inverse().unwrap();
            let oracle = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
            assert_relative_eq!(g.eval(&x), oracle, epsilon = 1e-10, max_relative = 1e-9);
        }
    }

    #[test]
    fn invariant_under_joint_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let x = Vector3::new(rng.random(), rng.random(), rng.random());
            let r = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ));
            let mut rotated = g.clone();
            rotated.orientation = canonical_quaternion(r * g.orientation);
            let x_rot = g.center + r * (x - g.center);
            assert!((g.eval(&x) - rotated.eval(&x_rot)).abs() < 1e-12);
        }
    }

    #[test]
    fn construction_canonicalizes_sign() {
        let q = UnitQuaternion::new_unchecked(Quaternion::new(-0.5, 0.5, 0.5, 0.5));
        let g = Gaussian3D::new(Vector3::zeros(), q, Vector3::repeat(1.0), 0.5, Vector3::zeros())
            .unwrap();
        assert!(g.orientation.w > 0.0);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let q = UnitQuaternion::identity();
        let c = Vector3::zeros();
        assert!(Gaussian3D::new(c, q, Vector3::new(1.0, 0.0, 1.0), 0.5, c).is_err());
        assert!(Gaussian3D::new(c, q, Vector3::repeat(1.0), 1.5, c).is_err());
        assert!(Gaussian3D::<f64>::quaternion_from_wxyz([1.0, 0.1, 0.0, 0.0]).is_err());
    }
}
