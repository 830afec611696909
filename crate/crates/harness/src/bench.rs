//! Multiresolution rendering benchmark and quadrature error tables.

use std::collections::BTreeMap;
use std::time::Instant;

use easlam_core::camera::Camera;
use easlam_core::gaussian::Scene;
use easlam_core::quadrature::{
    assign_importance_weights, dense_reference_integral, eigendecompose_2x2, generate_samples, integrated_alpha,
    QuadratureConfig, SampleStream,
};
use easlam_core::render::{render, AlphaMode, RenderConfig};
use easlam_core::Result;
use nalgebra::{Matrix2, Rotation2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{compute_psnr, compute_ssim, mse, SSIM_WINDOW};
use crate::synth::ground_truth;

pub const DEFAULT_SCALES: [f64; 5] = [2.0, 1.0, 0.5, 0.25, 0.125];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub scales: Vec<f64>,
    pub supersample: usize,
    pub render: RenderConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            scales: DEFAULT_SCALES.to_vec(),
            supersample: 4,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMetrics {
    pub scale: f64,
    pub alpha_mode: AlphaMode,
    /// Computed from the MSE pooled over all views.
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    /// Absent when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub mse: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDelta {
    pub scale: f64,
    pub mse_point: f64,
    pub mse_eaa: f64,
    pub psnr_gain_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgoMetrics {
    pub ate_before: f64,
    pub ate_after: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub fiedler: f64,
    pub spectral_edges: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchConfig,
    pub rows: Vec<ScaleMetrics>,
    pub deltas: Vec<ScaleDelta>,
    pub pgo: Option<PgoMetrics>,
    /// Seconds per stage.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub runtimes: BTreeMap<String, f64>,
}

impl BenchmarkReport {
    pub fn row(&self, scale: f64, mode: AlphaMode) -> Option<&ScaleMetrics> {
        self.rows.iter().find(|r| r.scale == scale && r.alpha_mode == mode)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| easlam_core::Error::InvalidArgument(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| easlam_core::Error::Parse {
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Aligned-column table for standard output.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:>7} {:>6} {:>10} {:>10} {:>8} {:>12}\n",
            "scale", "mode", "size", "psnr_db", "ssim", "mse"
        );
        for r in &self.rows {
            let ssim = r.ssim.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:>7} {:>6} {:>10} {:>10.3} {:>8} {:>12.4e}\n",
                r.scale,
                r.alpha_mode.to_string(),
                format!("{}x{}", r.width, r.height),
                r.psnr_db,
                ssim,
                r.mse
            ));
        }
        if let Some(p) = &self.pgo {
            s.push_str(&format!(
                "pgo: ate {:.5} -> {:.5} m, {} iterations, fiedler {:.4}\n",
                p.ate_before, p.ate_after, p.iterations, p.fiedler
            ));
        }
        s
    }
}

/// Renders every camera at every scale in both alpha modes and compares
/// against supersampled point-sampled ground truth at the same scale.
pub fn multiresolution_benchmark(
    scene: &Scene<f64>,
    cameras: &[Camera<f64>],
    cfg: &BenchConfig,
) -> Result<BenchmarkReport> {
    cfg.render.validate()?;
    let mut report = BenchmarkReport {
        config: cfg.clone(),
        ..BenchmarkReport::default()
    };
    for &scale in &cfg.scales {
        let t0 = Instant::now();
        let scaled: Vec<Camera<f64>> = cameras.iter().map(|c| c.scaled(scale)).collect::<Result<_>>()?;
        let truth: Vec<_> = scaled
            .iter()
            .map(|c| ground_truth(scene, c, cfg.supersample).map(|g| g.0))
            .collect::<Result<_>>()?;
        report
            .runtimes
            .insert(format!("ground_truth_x{scale}"), t0.elapsed().as_secs_f64());
        let mut by_mode = BTreeMap::new();
        for mode in [AlphaMode::PointSample, AlphaMode::Eaa] {
            let t0 = Instant::now();
            let rcfg = cfg.render.with_mode(mode);
            let (mut err, mut ssim_sum, mut ssim_ok) = (0.0, 0.0, true);
            for (cam, gt) in scaled.iter().zip(&truth) {
                let frame = render(scene, cam, &rcfg)?;
                err += mse(&frame.color, gt)?;
                if cam.width >= SSIM_WINDOW && cam.height >= SSIM_WINDOW {
                    ssim_sum += compute_ssim(&frame.color, gt)?;
                } else {
                    ssim_ok = false;
                }
            }
            let n = scaled.len().max(1) as f64;
            let m = err / n;
            let psnr = if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() };
            report
                .runtimes
                .insert(format!("render_{mode}_x{scale}"), t0.elapsed().as_secs_f64());
            by_mode.insert(mode.to_string(), m);
            report.rows.push(ScaleMetrics {
                scale,
                alpha_mode: mode,
                psnr_db: psnr,
                psnr_infinite: m == 0.0,
                ssim: (ssim_ok && !scaled.is_empty()).then_some(ssim_sum / n),
                mse: m,
                width: scaled.first().map(|c| c.width).unwrap_or(0),
                height: scaled.first().map(|c| c.height).unwrap_or(0),
            });
        }
        let (mp, me) = (by_mode["point"], by_mode["eaa"]);
        report.deltas.push(ScaleDelta {
            scale,
            mse_point: mp,
            mse_eaa: me,
            psnr_gain_db: 10.0 * (mp / me).log10(),
        });
    }
    Ok(report)
}

/// Per-image PSNR helper used by the CLI.
pub fn psnr_db(a: &easlam_core::image::Image<f64>, b: &easlam_core::image::Image<f64>) -> Result<f64> {
    Ok(compute_psnr(a, b)?.db)
}

/// One random projected Gaussian relative to the pixel at the origin's
/// center `(½, ½)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadCase {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub opacity: f64,
    pub pixel_center: Vector2<f64>,
}

/// κ uniform in `[1, κ_max]`, minor variance log-uniform in `[0.05, 4]` px²,
/// and the pixel center within Mahalanobis distance 3 of the mean.
pub fn random_quad_cases(count: usize, seed: u64, kappa_max: f64) -> Vec<QuadCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let kappa: f64 = rng.random_range(1.0..=kappa_max);
            let minor = rng.random_range(0.05f64.ln()..4.0f64.ln()).exp();
            let major = kappa * kappa * minor;
            let rot = Rotation2::new(rng.random_range(0.0..std::f64::consts::PI));
            let cov = rot.matrix() * Matrix2::from_diagonal(&Vector2::new(major, minor)) * rot.matrix().transpose();
            let u = loop {
                let u = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                if u.norm() <= 3.0 {
                    break u;
                }
            };
            let offset = rot.matrix() * Vector2::new(u.x * major.sqrt(), u.y * minor.sqrt());
            let pixel_center = Vector2::new(0.5, 0.5);
            QuadCase {
                mean2d: pixel_center - offset,
                cov2d: cov,
                opacity: rng.random_range(0.2..1.0),
                pixel_center,
            }
        })
        .collect()
}

pub fn quadrature_alpha(case: &QuadCase, k: usize, cfg: &QuadratureConfig, stream: SampleStream) -> Result<f64> {
    let frame = eigendecompose_2x2(&case.cov2d)?;
    let mut samples = generate_samples(&case.pixel_center, &case.mean2d, &frame, k, cfg, stream)?;
    assign_importance_weights(&mut samples, &frame, &case.pixel_center, cfg);
    Ok(integrated_alpha(case.opacity, &samples, &frame))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadRow {
    pub k: usize,
    pub mean_relative_error: f64,
    pub median_relative_error: f64,
    pub max_relative_error: f64,
    pub within_1e2: usize,
    pub cases: usize,
}

/// Relative error of the quadrature estimate against the dense midpoint
/// integral, for each sample count.
pub fn quadrature_error_table(
    cases: &[QuadCase],
    ks: &[usize],
    grid: usize,
    cfg: &QuadratureConfig,
) -> Result<Vec<QuadRow>> {
    let reference: Vec<f64> = cases
        .iter()
        .map(|c| dense_reference_integral(&c.pixel_center, &c.mean2d, &c.cov2d, c.opacity, grid))
        .collect();
    ks.iter()
        .map(|&k| {
            let mut errs = cases
                .iter()
                .zip(&reference)
                .enumerate()
                .map(|(i, (c, r))| {
                    let stream = SampleStream {
                        pixel_index: 0,
                        gaussian_index: i as u64,
                    };
                    Ok((quadrature_alpha(c, k, cfg, stream)? - r).abs() / r.abs().max(1e-300))
                })
                .collect::<Result<Vec<f64>>>()?;
            errs.sort_by(f64::total_cmp);
            let n = errs.len().max(1);
            Ok(QuadRow {
                k,
                mean_relative_error: errs.iter().sum::<f64>() / n as f64,
                median_relative_error: errs.get(errs.len() / 2).copied().unwrap_or(0.0),
                max_relative_error: errs.last().copied().unwrap_or(0.0),
                within_1e2: errs.iter().filter(|&&e| e <= 1e-2).count(),
                cases: errs.len(),
            })
        })
        .collect()
}

pub fn quad_table_tsv(rows: &[QuadRow]) -> String {
    let mut s = String::from("k\tmean_rel_err\tmedian_rel_err\tmax_rel_err\twithin_1e-2\tcases\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}\n",
            r.k, r.mean_relative_error, r.median_relative_error, r.max_relative_error, r.within_1e2, r.cases
        ));
    }
    s
}
