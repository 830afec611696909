//! Screen-space projection of 3D Gaussians, the per-primitive sampling
//! frequency and the 3D low-pass filter driven by it.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::quadrature::{eigendecompose_2x2, EigenFrame, EIGENVALUE_FLOOR};
use crate::scalar::Real;

/// Primitives closer than this to the camera (meters) are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// `c_f` in `Σ' = Σ + (c_f/ν̂)² I`.
    pub filter_constant: f64,
    /// Number of most recent keyframes contributing to sampling frequencies.
    pub keyframe_window: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            filter_constant: 0.2,
            keyframe_window: 8,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.filter_constant >= 0.0 && self.filter_constant.is_finite()) {
            return Err(Error::config("filter constant must be finite and non-negative"));
        }
        if self.keyframe_window == 0 {
            return Err(Error::config("keyframe window must hold at least one keyframe"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian<T: Real> {
    pub mean2d: Vector2<T>,
    pub cov2d: Matrix2<T>,
    /// Camera-frame depth of the center, meters.
    pub depth: T,
    pub source_index: usize,
    pub opacity: T,
    pub color: Vector3<T>,
    pub frame: EigenFrame<T>,
}

impl<T: Real> ProjectedGaussian<T> {
    /// Radius of the 3σ screen circle around the mean.
    pub fn extent(&self) -> T {
        T::lit(3.0) * self.frame.major_sigma()
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of the 3σ extent,
    /// clipped to the image, or `None` when it misses the image.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.extent();
        let lo_x = (self.mean2d.x - r).floor().as_f64().max(0.0);
        let lo_y = (self.mean2d.y - r).floor().as_f64().max(0.0);
        let hi_x = (self.mean2d.x + r).floor().as_f64().min(width as f64 - 1.0);
        let hi_y = (self.mean2d.y + r).floor().as_f64().min(height as f64 - 1.0);
        if !(lo_x <= hi_x && lo_y <= hi_y) {
            return None;
        }
        Some((lo_x as usize, lo_y as usize, hi_x as usize, hi_y as usize))
    }
}

/// Local affine (EWA) projection of `g` into `cam`.
///
/// Returns `None` when the center is behind the near plane or the 3σ screen
/// circle misses the image rectangle.
pub fn project_gaussian<T: Real>(
    g: &Gaussian3D<T>,
    cam: &Camera<T>,
    source_index: usize,
    near_plane: T,
) -> Option<ProjectedGaussian<T>> {
    let world_to_cam = cam.world_to_camera();
    let p = world_to_cam.transform_point(&g.center);
    if !(p.z > near_plane) {
        return None;
    }
    let w = world_to_cam.rotation;
    let cov_cam = w * g.covariance() * w.transpose();
    let iz = T::one() / p.z;
    let iz2 = iz * iz;
    #[rustfmt::skip]
    let jac = Matrix2x3::new(
        cam.fx * iz, T::zero(), -cam.fx * p.x * iz2,
        T::zero(), cam.fy * iz, -cam.fy * p.y * iz2,
    );
    let raw = jac * cov_cam * jac.transpose();
    let off = (raw[(0, 1)] + raw[(1, 0)]) * T::lit(0.5);
    let symmetric = Matrix2::new(raw[(0, 0)], off, off, raw[(1, 1)]);
    let frame = eigendecompose_2x2(&symmetric).ok()?;

    // Rebuild only when flooring changed the spectrum.
    let floor = T::lit(EIGENVALUE_FLOOR);
    let trace_gap = frame.eigvals.x + frame.eigvals.y - (symmetric[(0, 0)] + symmetric[(1, 1)]);
    let cov2d = if trace_gap > floor * T::lit(1e-3) {
        let c = frame.covariance();
        let o = (c[(0, 1)] + c[(1, 0)]) * T::lit(0.5);
        Matrix2::new(c[(0, 0)], o, o, c[(1, 1)])
    } else {
        symmetric
    };

    let mean2d = cam.project(&p);
    let r = T::lit(3.0) * frame.major_sigma();
    let (w_img, h_img) = (T::from_count(cam.width), T::from_count(cam.height));
    if mean2d.x + r < T::zero() || mean2d.x - r > w_img || mean2d.y + r < T::zero() || mean2d.y - r > h_img {
        return None;
    }
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        depth: p.z,
        source_index,
        opacity: g.opacity,
        color: g.color,
        frame,
    })
}

/// `max(prev, max_n f_n / d_n)`; pixels per meter.
pub fn update_sampling_frequency<T: Real>(prev: T, observations: &[(T, T)]) -> Result<T> {
    let mut best = prev;
    for &(focal, depth) in observations {
        if !(depth > T::zero()) || !focal.is_finite() {
            return Err(Error::invalid("observation depth must be positive and focal finite"));
        }
        best = best.max(focal / depth);
    }
    Ok(best)
}

/// Convolves the primitive with an isotropic Gaussian of variance
/// `(c_f/ν̂)²` and rescales opacity to preserve the integrated density:
/// `α' = α·sqrt(det Σ / det Σ')`.
///
/// A primitive that has never been observed (`ν̂ = 0`) is returned unchanged.
pub fn apply_3d_filter<T: Real>(g: &Gaussian3D<T>, filter_constant: T) -> Gaussian3D<T> {
    if !(g.sampling_frequency > T::zero()) {
        log::warn!("3D filter skipped: primitive has no sampling frequency");
        return g.clone();
    }
    let extra = (filter_constant / g.sampling_frequency).powi(2);
    let mut out = g.clone();
    let mut det_ratio = T::one();
    for i in 0..3 {
        let s2 = g.scales[i] * g.scales[i];
        let s2f = s2 + extra;
        out.scales[i] = s2f.sqrt();
        det_ratio *= s2 / s2f;
    }
    out.opacity = (g.opacity * det_ratio.sqrt()).min(g.opacity);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{se3_exp, Se3, Twist};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, UnitQuaternion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn camera() -> Camera<f64> {
        Camera::centered(300.0, 256, 256, Se3::identity()).unwrap()
    }

    #[test]
    fn on_axis_isotropic_matches_similar_triangles() {
        let (f, d, s) = (300.0, 4.0, 0.01);
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, d), s, 0.5, Vector3::zeros()).unwrap();
        let p = project_gaussian(&g, &camera(), 0, NEAR_PLANE).unwrap();
        let expected = (f * s / d).powi(2);
        assert_relative_eq!(p.cov2d, Matrix2::identity() * expected, max_relative = 1e-2);
        assert_eq!(p.depth, d);
        assert_eq!(p.mean2d, Vector2::new(128.0, 128.0));
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.1, 0.5, Vector3::zeros()).unwrap();
        assert!(project_gaussian(&g, &camera(), 0, NEAR_PLANE).is_none());
        let close = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 0.005), 0.1, 0.5, Vector3::zeros()).unwrap();
        assert!(project_gaussian(&close, &camera(), 0, NEAR_PLANE).is_none());
    }

    #[test]
    fn off_image_is_culled() {
        let g = Gaussian3D::isotropic(Vector3::new(10.0, 0.0, 2.0), 0.01, 0.5, Vector3::zeros()).unwrap();
        assert!(project_gaussian(&g, &camera(), 0, NEAR_PLANE).is_none());
    }

    #[test]
    fn off_axis_anisotropic_matches_monte_carlo() {
        let pose = se3_exp(&Twist::new(Vector3::new(0.2, -0.1, -0.3), Vector3::new(0.05, 0.1, -0.2))).unwrap();
        let cam = Camera::centered(300.0, 256, 256, pose).unwrap();
        let g = Gaussian3D::new(
            Vector3::new(0.6, 0.4, 3.0),
            UnitQuaternion::from_euler_angles(0.4, -0.7, 1.2),
            Vector3::new(0.06, 0.02, 0.035),
            0.9,
            Vector3::zeros(),
        )
        .unwrap();
        let proj = project_gaussian(&g, &cam, 0, NEAR_PLANE).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let (o, s) = (g.rotation(), g.scales);
        let w2c = cam.world_to_camera();
        let n = 100_000;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let z = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let x = g.center + o * z.component_mul(&s);
            pts.push(cam.project(&w2c.transform_point(&x)));
        }
        let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n as f64;
        let cov = pts
            .iter()
            .fold(Matrix2::zeros(), |a, p| a + (p - mean) * (p - mean).transpose())
            / (n - 1) as f64;
        let rel = (cov - proj.cov2d).norm() / cov.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn sampling_frequency_examples() {
        assert_eq!(update_sampling_frequency(0.0, &[(600.0, 2.0)]).unwrap(), 300.0);
        assert_eq!(update_sampling_frequency(300.0, &[(600.0, 4.0)]).unwrap(), 300.0);
        assert_eq!(update_sampling_frequency(100.0, &[(600.0, 2.0), (500.0, 1.0)]).unwrap(), 500.0);
        assert_eq!(update_sampling_frequency(42.0, &[]).unwrap(), 42.0);
        assert!(update_sampling_frequency(1.0, &[(600.0, 0.0)]).is_err());
    }

    #[test]
    fn filter_vanishes_at_infinite_frequency() {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.7, Vector3::zeros()).unwrap();
        g.sampling_frequency = 1e12;
        let f = apply_3d_filter(&g, 0.2);
        assert_relative_eq!(f.scales, g.scales, max_relative = 1e-15);
        assert_relative_eq!(f.opacity, g.opacity, max_relative = 1e-15);
    }

    #[test]
    fn filter_isotropic_example() {
        let mut g = Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.9, Vector3::zeros()).unwrap();
        g.sampling_frequency = 10.0;
        let f = apply_3d_filter(&g, 0.2);
        assert_relative_eq!(f.covariance(), Matrix3::identity() * 0.0104, max_relative = 1e-12);
        // Determinant ratio evaluated in closed form: (0.01/0.0104)^{3/2}.
        let oracle = 0.9 * (0.01f64 / 0.0104).powf(1.5);
        assert_relative_eq!(f.opacity, oracle, max_relative = 1e-13);
    }

    #[test]
    fn unobserved_primitive_unchanged() {
        let g = Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.9, Vector3::zeros()).unwrap();
        assert_eq!(apply_3d_filter(&g, 0.2), g);
    }

    proptest! {
        #[test]
        fn filter_never_raises_opacity_or_lowers_eigenvalues(
            s in prop::array::uniform3(1e-3f64..1.0), nu in 1e-2f64..1e4,
            alpha in 0.0f64..1.0, cf in 0.0f64..2.0, angles in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let mut g = Gaussian3D::new(
                Vector3::zeros(),
                UnitQuaternion::from_euler_angles(angles[0], angles[1], angles[2]),
                Vector3::from(s), alpha, Vector3::zeros(),
            ).unwrap();
            g.sampling_frequency = nu;
            let f = apply_3d_filter(&g, cf);
            prop_assert!(f.opacity <= g.opacity);
            for i in 0..3 {
                prop_assert!(f.scales[i] >= g.scales[i]);
            }
            prop_assert!(f.covariance().determinant() >= g.covariance().determinant() * (1.0 - 1e-12));
        }

        #[test]
        fn projected_covariance_stays_positive_definite(
            pos in prop::array::uniform3(-1.0f64..1.0), depth in 0.5f64..6.0,
            s in prop::array::uniform3(1e-4f64..0.5), angles in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let g = Gaussian3D::new(
                Vector3::new(pos[0], pos[1], depth),
                UnitQuaternion::from_euler_angles(angles[0], angles[1], angles[2]),
                Vector3::from(s), 0.5, Vector3::zeros(),
            ).unwrap();
            if let Some(p) = project_gaussian(&g, &camera(), 0, NEAR_PLANE) {
                prop_assert!((p.cov2d[(0, 1)] - p.cov2d[(1, 0)]).abs() <= 1e-12);
                let f = eigendecompose_2x2(&p.cov2d).unwrap();
                prop_assert!(f.eigvals.y >= EIGENVALUE_FLOOR * (1.0 - 1e-6));
                prop_assert!(p.cov2d.determinant() > 0.0);
                prop_assert!(p.depth > 0.0);
            }
        }
    }

    #[test]
    fn sampling_frequency_monotone_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let obs: Vec<(f64, f64)> = (0..rng.random_range(0..6))
                .map(|_| (rng.random_range(100.0..800.0), rng.random_range(0.2..10.0)))
                .collect();
            let prev = rng.random_range(0.0..2000.0);
            let once = update_sampling_frequency(prev, &obs).unwrap();
            assert!(once >= prev);
            assert_eq!(update_sampling_frequency(once, &obs).unwrap(), once);
            let higher = update_sampling_frequency(prev + 1.0, &obs).unwrap();
            assert!(higher >= once);
        }
    }
}
