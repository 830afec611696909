//! Elliptical adaptive quadrature of a projected Gaussian over one pixel.
//!
//! The pixel footprint is split into a √K×√K grid of strata with one
//! low-discrepancy sample per stratum. Each sample is expressed in the
//! Gaussian's principal frame `v = Qᵀ(x − μ)` and weighted by
//!
//! ```text
//! w = q(x)/p(x) · (1 + γ ln κ) · exp(−β d_b(x)),   q(x) = exp(−½‖Λ^{-1/2} v‖²)
//! ```
//!
//! where `d_b` is the distance from the sample to the nearest pixel edge. The
//! integrated opacity is the weight-normalized average of the Gaussian over the
//! samples, scaled by the primitive opacity. Weights are treated as constants
//! when differentiating.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower bound applied to projected covariance eigenvalues, pixels².
pub const EIGENVALUE_FLOOR: f64 = 1e-8;

/// Principal axes of a 2D covariance. Columns of `eigvecs` are `e₁, e₂` with
/// `λ₁ ≥ λ₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenFrame<T: Real> {
    pub eigvecs: Matrix2<T>,
    pub eigvals: Vector2<T>,
    /// `κ = sqrt(λ₁/λ₂)`.
    pub condition_number: T,
}

impl<T: Real> EigenFrame<T> {
    /// `Q Λ Qᵀ`, the covariance after eigenvalue flooring.
    pub fn covariance(&self) -> Matrix2<T> {
        self.eigvecs * Matrix2::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }

    pub fn inverse_covariance(&self) -> Matrix2<T> {
        let inv = self.eigvals.map(|l| T::one() / l);
        self.eigvecs * Matrix2::from_diagonal(&inv) * self.eigvecs.transpose()
    }

    /// Principal-axis coordinates `Qᵀ d` of a displacement `d`.
    pub fn to_principal(&self, d: &Vector2<T>) -> Vector2<T> {
        self.eigvecs.tr_mul(d)
    }

    /// Quadratic form `−½ vᵀ Λ⁻¹ v`.
    pub fn exponent(&self, v: &Vector2<T>) -> T {
        -T::lit(0.5) * (v.x * v.x / self.eigvals.x + v.y * v.y / self.eigvals.y)
    }

    /// Standard deviation along the major axis.
    pub fn major_sigma(&self) -> T {
        self.eigvals.x.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSample<T: Real> {
    pub position: Vector2<T>,
    pub principal_coords: Vector2<T>,
    pub proposal_density: T,
    pub weight: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureConfig {
    /// Anisotropy gain γ in `1 + γ ln κ`.
    pub gamma: f64,
    /// Boundary decay rate β, per pixel.
    pub beta: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub deterministic_seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            gamma: 0.5,
            beta: 2.0,
            k_min: 4,
            k_max: 64,
            deterministic_seed: 0,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be finite and non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be finite and non-negative"));
        }
        if self.k_min < 1 {
            return Err(Error::config("k_min must be at least 1"));
        }
        if self.k_max < self.k_min {
            return Err(Error::config("k_max must be at least k_min"));
        }
        let top = largest_square_at_most(self.k_max);
        if top < self.k_min {
            return Err(Error::config("no perfect square lies in [k_min, k_max]"));
        }
        Ok(())
    }
}

/// Identifies the (pixel, primitive) pair a sample set belongs to, so that
/// sample offsets are reproducible independently of evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SampleStream {
    pub pixel_index: u64,
    pub gaussian_index: u64,
}

/// Gradient of the integrated opacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaGradient<T: Real> {
    pub d_opacity: T,
    pub d_mean2d: Vector2<T>,
    /// Symmetric matrix `G` such that `dα = tr(G dΣ)` for symmetric `dΣ`.
    pub d_cov2d: Matrix2<T>,
}

fn canonical_sign<T: Real>(v: Vector2<T>) -> Vector2<T> {
    let lead = if v.y.abs() > v.x.abs() { v.y } else { v.x };
    if lead < T::zero() {
        -v
    } else {
        v
    }
}

/// Closed-form symmetric 2×2 eigendecomposition with descending eigenvalues,
/// sign-canonical eigenvectors (largest-magnitude component positive, first
/// component on ties) and eigenvalues clamped to [`EIGENVALUE_FLOOR`].
pub fn eigendecompose_2x2<T: Real>(cov: &Matrix2<T>) -> Result<EigenFrame<T>> {
    let (a, b, c, d) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
    if !(a.is_finite() && b.is_finite() && c.is_finite() && d.is_finite()) {
        return Err(Error::invalid("non-finite covariance"));
    }
    if (b - c).abs() > T::lit(1e-9) {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let half = T::lit(0.5);
    let b = (b + c) * half;
    let mean = (a + d) * half;
    let diff = (a - d) * half;
    let radius = (diff * diff + b * b).sqrt();
    let l1 = mean + radius;
    let l2 = mean - radius;

    let isotropic = radius <= T::default_epsilon() * mean.abs().max(T::one());
    let e1 = if isotropic {
        Vector2::new(T::one(), T::zero())
    } else if a >= d {
        Vector2::new(l1 - d, b).normalize()
    } else {
        Vector2::new(b, l1 - a).normalize()
    };
    let e1 = canonical_sign(e1);
    let e2 = canonical_sign(Vector2::new(-e1.y, e1.x));

    let floor = T::lit(EIGENVALUE_FLOOR);
    let eigvals = Vector2::new(l1.max(floor), l2.max(floor));
    Ok(EigenFrame {
        eigvecs: Matrix2::from_columns(&[e1, e2]),
        eigvals,
        condition_number: (eigvals.x / eigvals.y).sqrt(),
    })
}

fn largest_square_at_most(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r * r
}

fn smallest_square_at_least(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r * r
}

/// Exact integer square root, if `n` is a perfect square.
pub fn perfect_square_root(n: usize) -> Option<usize> {
    let r = (largest_square_at_most(n) as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Stratified sample count for condition number `kappa`: the smallest perfect
/// square at least `k_min·(1 + ⌊log₂ κ⌋)`, capped at the largest perfect
/// square not above `k_max`.
pub fn sample_count<T: Real>(kappa: T, cfg: &QuadratureConfig) -> usize {
    let kappa = kappa.as_f64().max(1.0);
    let octaves = if kappa.is_finite() {
        kappa.log2().floor() as usize
    } else {
        usize::MAX / 2
    };
    let base = cfg.k_min.saturating_mul(1 + octaves);
    let top = largest_square_at_most(cfg.k_max);
    smallest_square_at_least(base.min(cfg.k_max)).min(top).max(1)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_from_bits(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Per-stream Cranley–Patterson shift applied to the R2 sequence.
fn stream_shift(seed: u64, stream: SampleStream) -> (f64, f64) {
    let h = splitmix64(
        seed ^ splitmix64(stream.pixel_index) ^ splitmix64(stream.gaussian_index ^ 0xA5A5_5A5A_DEAD_BEEF),
    );
    (unit_from_bits(h), unit_from_bits(splitmix64(h)))
}

// Generalized golden ratio for two dimensions (plastic number).
const R2_A1: f64 = 0.754_877_666_246_692_7;
const R2_A2: f64 = 0.569_840_290_998_053_3;

/// Fills `out` with one sample per stratum of the unit pixel centered at
/// `pixel_center`. Weights are left at zero.
pub fn generate_samples_into<T: Real>(
    out: &mut Vec<QuadratureSample<T>>,
    pixel_center: &Vector2<T>,
    mean2d: &Vector2<T>,
    frame: &EigenFrame<T>,
    k: usize,
    cfg: &QuadratureConfig,
    stream: SampleStream,
) -> Result<()> {
    let side = perfect_square_root(k)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::invalid(format!("sample count {k} is not a perfect square")))?;
    out.clear();
    out.reserve(k);
    let (sx, sy) = stream_shift(cfg.deterministic_seed, stream);
    let cell = 1.0 / side as f64;
    let density = T::from_count(k);
    let half = T::lit(0.5);
    let corner = Vector2::new(pixel_center.x - half, pixel_center.y - half);
    for j in 0..side {
        for i in 0..side {
            let n = (j * side + i) as f64;
            let ox = (0.5 + n * R2_A1 + sx).fract();
            let oy = (0.5 + n * R2_A2 + sy).fract();
            let position = Vector2::new(
                corner.x + T::lit((i as f64 + ox) * cell),
                corner.y + T::lit((j as f64 + oy) * cell),
            );
            out.push(QuadratureSample {
                position,
                principal_coords: frame.to_principal(&(position - mean2d)),
                proposal_density: density,
                weight: T::zero(),
            });
        }
    }
    Ok(())
}

pub fn generate_samples<T: Real>(
    pixel_center: &Vector2<T>,
    mean2d: &Vector2<T>,
    frame: &EigenFrame<T>,
    k: usize,
    cfg: &QuadratureConfig,
    stream: SampleStream,
) -> Result<Vec<QuadratureSample<T>>> {
    let mut out = Vec::with_capacity(k);
    generate_samples_into(&mut out, pixel_center, mean2d, frame, k, cfg, stream)?;
    Ok(out)
}

/// Distance from `x` to the nearest edge of the unit pixel at `pixel_center`.
pub fn boundary_distance<T: Real>(x: &Vector2<T>, pixel_center: &Vector2<T>) -> T {
    let half = T::lit(0.5);
    let dx = half - (x.x - pixel_center.x).abs();
    let dy = half - (x.y - pixel_center.y).abs();
    dx.min(dy).max(T::zero())
}

/// The geometry-boundary enhancement factor `(1 + γ ln κ)·exp(−β d_b)`.
pub fn enhancement_factor<T: Real>(kappa: T, d_b: T, cfg: &QuadratureConfig) -> T {
    let gain = T::one() + T::lit(cfg.gamma) * kappa.max(T::one()).ln();
    gain * (-T::lit(cfg.beta) * d_b).exp()
}

/// Sets the importance weight of every sample in place.
pub fn assign_importance_weights<T: Real>(
    samples: &mut [QuadratureSample<T>],
    frame: &EigenFrame<T>,
    pixel_center: &Vector2<T>,
    cfg: &QuadratureConfig,
) {
    for s in samples.iter_mut() {
        let target = frame.exponent(&s.principal_coords).exp();
        let d_b = boundary_distance(&s.position, pixel_center);
        let psi = enhancement_factor(frame.condition_number, d_b, cfg);
        s.weight = (target / s.proposal_density * psi).max(T::zero());
    }
}

pub fn importance_weights<T: Real>(
    mut samples: Vec<QuadratureSample<T>>,
    frame: &EigenFrame<T>,
    pixel_center: &Vector2<T>,
    cfg: &QuadratureConfig,
) -> Vec<QuadratureSample<T>> {
    assign_importance_weights(&mut samples, frame, pixel_center, cfg);
    samples
}

/// Weight-normalized average of `exp(P_k)`; zero when all weights vanish.
fn weighted_mean_exponential<T: Real>(samples: &[QuadratureSample<T>], frame: &EigenFrame<T>) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for s in samples {
        num += s.weight * frame.exponent(&s.principal_coords).exp();
        den += s.weight;
    }
    if den > T::zero() {
        (num / den).min(T::one())
    } else {
        T::zero()
    }
}

/// Integrated opacity `α = opacity · Σ w_k exp(P_k) / Σ w_k`, in `[0, opacity]`.
pub fn integrated_alpha<T: Real>(opacity: T, samples: &[QuadratureSample<T>], frame: &EigenFrame<T>) -> T {
    opacity * weighted_mean_exponential(samples, frame)
}

/// Gradient of [`integrated_alpha`] with the weights held fixed.
pub fn integrated_alpha_gradient<T: Real>(
    opacity: T,
    samples: &[QuadratureSample<T>],
    frame: &EigenFrame<T>,
    mean2d: &Vector2<T>,
) -> AlphaGradient<T> {
    let mut den = T::zero();
    let mut num = T::zero();
    let mut d_mean = Vector2::zeros();
    let mut d_cov = Matrix2::zeros();
    let inv_l = frame.eigvals.map(|l| T::one() / l);
    let half = T::lit(0.5);
    for s in samples {
        den += s.weight;
        let e = s.weight * frame.exponent(&s.principal_coords).exp();
        num += e;
        // Σ⁻¹(x − μ) = Q Λ⁻¹ v; recomputing v from the position keeps the
        // expression tied to `mean2d` rather than to cached coordinates.
        let v = frame.to_principal(&(s.position - mean2d));
        let g = frame.eigvecs * v.component_mul(&inv_l);
        d_mean += g * e;
        d_cov += g * g.transpose() * (e * half);
    }
    if den <= T::zero() {
        return AlphaGradient {
            d_opacity: T::zero(),
            d_mean2d: Vector2::zeros(),
            d_cov2d: Matrix2::zeros(),
        };
    }
    let scale = opacity / den;
    AlphaGradient {
        d_opacity: num / den,
        d_mean2d: d_mean * scale,
        d_cov2d: d_cov * scale,
    }
}

/// All-in-one evaluation used by the renderer: κ-adaptive sample count,
/// sample generation, weighting and the integrated opacity. `scratch` is
/// reused between calls to avoid allocation.
pub fn pixel_integrated_alpha<T: Real>(
    scratch: &mut Vec<QuadratureSample<T>>,
    pixel_center: &Vector2<T>,
    mean2d: &Vector2<T>,
    frame: &EigenFrame<T>,
    opacity: T,
    cfg: &QuadratureConfig,
    stream: SampleStream,
) -> Result<T> {
    let k = sample_count(frame.condition_number, cfg);
    generate_samples_into(scratch, pixel_center, mean2d, frame, k, cfg, stream)?;
    assign_importance_weights(scratch, frame, pixel_center, cfg);
    Ok(integrated_alpha(opacity, scratch, frame))
}

/// Midpoint-rule integral of `opacity · exp(−½ Δᵀ Σ⁻¹ Δ)` over the unit pixel on
/// a `grid_n × grid_n` grid. Uses an explicit inverse of `cov2d`, independent of
/// the eigen machinery above.
pub fn dense_reference_integral<T: Real>(
    pixel_center: &Vector2<T>,
    mean2d: &Vector2<T>,
    cov2d: &Matrix2<T>,
    opacity: T,
    grid_n: usize,
) -> T {
    let n = grid_n.max(1);
    let (a, b, d) = (cov2d[(0, 0)], (cov2d[(0, 1)] + cov2d[(1, 0)]) * T::lit(0.5), cov2d[(1, 1)]);
    let mut det = a * d - b * b;
    let floor = T::lit(EIGENVALUE_FLOOR);
    let (a, d) = if det <= floor * floor {
        det = (a + floor) * (d + floor) - b * b;
        (a + floor, d + floor)
    } else {
        (a, d)
    };
    let (ia, ib, id) = (d / det, -b / det, a / det);
    let step = T::one() / T::from_count(n);
    let half = T::lit(0.5);
    let x0 = pixel_center.x - half - mean2d.x;
    let y0 = pixel_center.y - half - mean2d.y;
    let mut total = T::zero();
    for j in 0..n {
        let dy = y0 + (T::from_count(j) + half) * step;
        let mut row = T::zero();
        for i in 0..n {
            let dx = x0 + (T::from_count(i) + half) * step;
            let q = ia * dx * dx + T::lit(2.0) * ib * dx * dy + id * dy * dy;
            row += (-half * q).exp();
        }
        total += row;
    }
    opacity * total * step * step
}
