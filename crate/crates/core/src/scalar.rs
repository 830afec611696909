//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the geometry, quadrature and spectral code.
///
/// Everything is written against this trait and instantiated as `f64` (the
/// default used by the renderer and solvers) or `f32`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Converts a count or index into `Self`.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// Lossy conversion to `f64` for reporting and IO.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance for orthonormality checks on rotations.
    ///
    /// 1e-9 for `f64`; widened to a few hundred ulps for narrower types.
    #[inline]
    fn rotation_tolerance() -> Self {
        let eps = Self::default_epsilon() * Self::lit(512.0);
        eps.max(Self::lit(1e-9))
    }
}

impl Real for f32 {}
impl Real for f64 {}
