//! Frequency-domain analysis of camera trajectories: windowed DFT of the
//! six pose components, per-window spectral centroids, and the coherence,
//! regularity and confidence scores built on them.

use std::io::{BufRead, Write};

use nalgebra::{Complex, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{se3_log, so3_log, Se3};
use crate::scalar::Real;

/// Pose components `[t, ω]` (meters, axis-angle radians) with a timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSample<T: Real> {
    pub components: Vector6<T>,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralSignature<T: Real> {
    pub centroids: Vector6<T>,
}

impl<T: Real> SpectralSignature<T> {
    pub fn zero() -> Self {
        SpectralSignature {
            centroids: Vector6::zeros(),
        }
    }

    /// Mean of the three translation centroids.
    pub fn translation_mean(&self) -> T {
        (self.centroids[0] + self.centroids[1] + self.centroids[2]) / T::lit(3.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    pub window: usize,
    pub hop: usize,
    pub eps_reg: f64,
    /// Per meter.
    pub alpha_t: f64,
    /// Per radian.
    pub alpha_r: f64,
    pub beta_c: f64,
    pub beta_g: f64,
    /// Subtract each window's mean before the transform.
    pub remove_mean: bool,
    /// Use rotation increments `log(R_{i-1}ᵀ R_i)` instead of absolute
    /// orientations.
    pub incremental_rotation: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            window: 32,
            hop: 16,
            eps_reg: 1e-8,
            alpha_t: 1.0,
            alpha_r: 1.0,
            beta_c: 0.5,
            beta_g: 0.5,
            remove_mean: false,
            incremental_rotation: false,
        }
    }
}

impl SpectralConfig {
    pub fn omega_max(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 4 {
            return Err(Error::config("spectral window must hold at least 4 poses"));
        }
        if self.hop == 0 {
            return Err(Error::config("hop must be at least 1"));
        }
        if !(self.eps_reg >= 0.0 && self.alpha_t >= 0.0 && self.alpha_r >= 0.0) {
            return Err(Error::config("eps_reg, alpha_t and alpha_r must be non-negative"));
        }
        if !(self.beta_c >= 0.0 && self.beta_g >= 0.0) || (self.beta_c + self.beta_g - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "beta_c + beta_g must equal 1 (got {} + {})",
                self.beta_c, self.beta_g
            )));
        }
        Ok(())
    }
}

/// `½(1 − cos(2πn/(N−1)))` for zero-based `n`.
pub fn hann_window<T: Real>(n: usize, len: usize) -> T {
    if len < 2 {
        return T::one();
    }
    let phase = T::two_pi() * T::from_count(n) / T::from_count(len - 1);
    T::lit(0.5) * (T::one() - phase.cos())
}

/// Six rows (one per pose component) of `ω_max + 1` coefficients.
pub type WindowSpectrum<T> = [Vec<Complex<T>>; 6];

/// Converts absolute poses to per-pose component vectors.
pub fn pose_samples<T: Real>(poses: &[Se3<T>], timestamps: &[f64], cfg: &SpectralConfig) -> Result<Vec<PoseSample<T>>> {
    if poses.len() != timestamps.len() {
        return Err(Error::invalid("one timestamp per pose is required"));
    }
    if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("timestamps must be strictly increasing"));
    }
    let mut out = Vec::with_capacity(poses.len());
    for (i, (p, &t)) in poses.iter().zip(timestamps).enumerate() {
        let w = if cfg.incremental_rotation {
            if i == 0 {
                Vector3::zeros()
            } else {
                so3_log(&(poses[i - 1].rotation.transpose() * p.rotation))
            }
        } else {
            so3_log(&p.rotation)
        };
        out.push(PoseSample {
            components: Vector6::new(p.translation.x, p.translation.y, p.translation.z, w.x, w.y, w.z),
            timestamp: t,
        });
    }
    Ok(out)
}

/// Hann-windowed DFT of poses `k .. k + N_w` for bins `0..=ω_max`.
pub fn sliding_window_dft<T: Real>(poses: &[PoseSample<T>], k: usize, cfg: &SpectralConfig) -> Result<WindowSpectrum<T>> {
    cfg.validate()?;
    let nw = cfg.window;
    if k + nw > poses.len() {
        return Err(Error::invalid(format!(
            "window [{k}, {}) extends past trajectory of {} poses",
            k + nw,
            poses.len()
        )));
    }
    let window: Vec<T> = (0..nw).map(|n| hann_window(n, nw)).collect();
    let omega_max = cfg.omega_max();
    let mut out: WindowSpectrum<T> = Default::default();
    for (d, row) in out.iter_mut().enumerate() {
        let mut x: Vec<T> = (0..nw).map(|n| poses[k + n].components[d]).collect();
        if cfg.remove_mean {
            let mean = x.iter().fold(T::zero(), |a, &b| a + b) / T::from_count(nw);
            x.iter_mut().for_each(|v| *v -= mean);
        }
        *row = (0..=omega_max)
            .map(|w| {
                let mut acc = Complex::new(T::zero(), T::zero());
                for n in 0..nw {
                    let phase = -T::two_pi() * T::from_count((w * n) % nw) / T::from_count(nw);
                    let v = x[n] * window[n];
                    acc += Complex::new(v * phase.cos(), v * phase.sin());
                }
                acc
            })
            .collect();
    }
    Ok(out)
}

/// Power-weighted frequency centroid of each component.
pub fn spectral_signature<T: Real>(dft: &WindowSpectrum<T>, cfg: &SpectralConfig) -> SpectralSignature<T> {
    let eps = T::lit(cfg.eps_reg);
    let mut centroids = Vector6::zeros();
    for (d, row) in dft.iter().enumerate() {
        let (mut num, mut den) = (T::zero(), T::zero());
        for (w, c) in row.iter().enumerate() {
            let p = c.norm_sqr();
            num += T::from_count(w) * p;
            den += p;
        }
        let denom = den + eps;
        centroids[d] = if denom > T::zero() { num / denom } else { T::zero() };
    }
    SpectralSignature { centroids }
}

/// `½(1 + ⟨a, b⟩ / (‖a‖‖b‖ + ε))`.
pub fn frequency_coherence<T: Real>(a: &SpectralSignature<T>, b: &SpectralSignature<T>, cfg: &SpectralConfig) -> T {
    let denom = a.centroids.norm() * b.centroids.norm() + T::lit(cfg.eps_reg);
    let ratio = if denom > T::zero() {
        a.centroids.dot(&b.centroids) / denom
    } else {
        T::zero()
    };
    T::lit(0.5) * (T::one() + ratio)
}

/// `exp(−α_t‖ρ‖ − α_r‖ω‖)` where `(ρ, ω) = log(rel)`.
pub fn geometric_regularity<T: Real>(rel: &Se3<T>, cfg: &SpectralConfig) -> T {
    let xi = se3_log(rel);
    (-(T::lit(cfg.alpha_t) * xi.translation().norm() + T::lit(cfg.alpha_r) * xi.rotation().norm())).exp()
}

/// `β_c·coh + β_g·reg`.
pub fn spectral_confidence<T: Real>(coh: T, reg: T, cfg: &SpectralConfig) -> Result<T> {
    cfg.validate()?;
    Ok(T::lit(cfg.beta_c) * coh + T::lit(cfg.beta_g) * reg)
}

/// Signatures of windows starting at `0, hop, 2·hop, …` that fit inside the
/// trajectory.
pub fn trajectory_signatures<T: Real>(
    poses: &[PoseSample<T>],
    cfg: &SpectralConfig,
) -> Result<Vec<(usize, SpectralSignature<T>)>> {
    cfg.validate()?;
    if poses.len() < cfg.window {
        return Err(Error::invalid(format!(
            "trajectory of {} poses is shorter than the {}-pose window",
            poses.len(),
            cfg.window
        )));
    }
    (0..=poses.len() - cfg.window)
        .step_by(cfg.hop)
        .map(|k| Ok((k, spectral_signature(&sliding_window_dft(poses, k, cfg)?, cfg))))
        .collect()
}

/// For each of `n` poses, the signature of the window whose center is
/// nearest (earlier window on ties).
pub fn assign_signatures<T: Real>(
    n: usize,
    windows: &[(usize, SpectralSignature<T>)],
    cfg: &SpectralConfig,
) -> Vec<SpectralSignature<T>> {
    let half = (cfg.window as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            windows
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 + half - i as f64).abs();
                    let db = (b.0 as f64 + half - i as f64).abs();
                    da.total_cmp(&db)
                })
                .map(|w| w.1)
                .unwrap_or_else(SpectralSignature::zero)
        })
        .collect()
}

/// Reads `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
pub fn read_tum<T: Real, R: BufRead>(input: R) -> Result<Vec<(f64, Se3<T>)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if v.len() != 8 {
            return Err(Error::parse(i + 1, format!("expected 8 fields, found {}", v.len())));
        }
        let q = nalgebra::Quaternion::new(T::lit(v[7]), T::lit(v[4]), T::lit(v[5]), T::lit(v[6]));
        if !(q.norm() > T::zero()) {
            return Err(Error::parse(i + 1, "zero quaternion"));
        }
        let pose = Se3::from_quaternion(
            &UnitQuaternion::from_quaternion(q),
            Vector3::new(T::lit(v[1]), T::lit(v[2]), T::lit(v[3])),
        );
        out.push((v[0], pose));
    }
    Ok(out)
}

pub fn write_tum<T: Real, W: Write>(traj: &[(f64, Se3<T>)], mut out: W) -> Result<()> {
    writeln!(out, "# timestamp tx ty tz qx qy qz qw")?;
    for (t, p) in traj {
        let q = p.quaternion();
        let q = q.as_ref();
        writeln!(
            out,
            "{:.9} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
            t,
            p.translation.x.as_f64(),
            p.translation.y.as_f64(),
            p.translation.z.as_f64(),
            q.i.as_f64(),
            q.j.as_f64(),
            q.k.as_f64(),
            q.w.as_f64()
        )?;
    }
    Ok(())
}
