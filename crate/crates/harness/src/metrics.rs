//! Image and trajectory metrics.

use easlam_core::image::Image;
use easlam_core::lie::Se3;
use easlam_core::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    /// `+inf` when the images are identical.
    pub db: f64,
    pub mse: f64,
    pub infinite: bool,
}

pub fn mse(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    if !a.same_shape(b) || a.channels != b.channels {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if a.data.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn compute_psnr(a: &Image<f64>, b: &Image<f64>) -> Result<Psnr> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr {
            db: f64::INFINITY,
            mse: 0.0,
            infinite: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * (1.0 / m).log10(),
        mse: m,
        infinite: false,
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 11×11 Gaussian window, row-major.
pub fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM of the luminance channels over every window position that fits
/// inside the image.
pub fn compute_ssim(a: &Image<f64>, b: &Image<f64>) -> Result<f64> {
    if !a.same_shape(b) || a.channels != b.channels {
        return Err(Error::InvalidArgument("shape mismatch".into()));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (la, lb) = if a.channels == 1 {
        (a.clone(), b.clone())
    } else {
        (a.luminance()?, b.luminance()?)
    };
    let w = ssim_window();
    let (nx, ny) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y0 in 0..ny {
        for x0 in 0..nx {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = w[j * SSIM_WINDOW + i];
                    let (va, vb) = (la.get(x0 + i, y0 + j, 0), lb.get(x0 + i, y0 + j, 0));
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok((total / (nx * ny) as f64).clamp(-1.0, 1.0))
}

/// Rotation and translation minimizing `Σ‖R eᵢ + t − gᵢ‖²` (no scale).
pub fn umeyama_rigid(estimate: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "alignment needs equal non-empty point sets, got {} and {}",
            estimate.len(),
            truth.len()
        )));
    }
    let n = estimate.len() as f64;
    let ce = estimate.iter().sum::<Vector3<f64>>() / n;
    let cg = truth.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in estimate.iter().zip(truth) {
        h += (g - cg) * (e - ce).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    Ok((r, cg - r * ce))
}

/// Translational RMSE after rigid alignment of the estimate onto the truth.
pub fn compute_ate(estimate: &[Se3<f64>], truth: &[Se3<f64>]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.len() < 3 {
        return Err(Error::InvalidArgument("ATE needs at least 3 poses".into()));
    }
    let e: Vec<Vector3<f64>> = estimate.iter().map(|p| p.translation).collect();
    let g: Vec<Vector3<f64>> = truth.iter().map(|p| p.translation).collect();
    let (r, t) = umeyama_rigid(&e, &g)?;
    let sq: f64 = e.iter().zip(&g).map(|(a, b)| (r * a + t - b).norm_squared()).sum();
    Ok((sq / e.len() as f64).sqrt())
}
