//! Multi-modal global image descriptors and their hybrid similarity.
//!
//! A descriptor concatenates four blocks, each L2-normalized on its own:
//!
//! | block | size | content |
//! |-------|------|---------|
//! | freq  | 32   | radial power spectrum of the windowed, mean-removed luminance |
//! | grad  | 16   | magnitude-weighted gradient orientation histogram (Sobel, scales 1 and 2) |
//! | tex   | 16   | mean absolute response of a fixed bank of zero-mean 5×5 kernels |
//! | color | 48   | 16-bin histogram per RGB channel |

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Real;

pub const FREQ_BINS: usize = 32;
pub const GRAD_BINS: usize = 16;
pub const TEX_KERNELS: usize = 16;
pub const COLOR_BINS: usize = 16;
pub const DESCRIPTOR_DIM: usize = FREQ_BINS + GRAD_BINS + TEX_KERNELS + 3 * COLOR_BINS;
pub const MIN_IMAGE_SIDE: usize = 16;

/// Norm below which a block is left at zero instead of being normalized.
const BLOCK_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub freq: [f64; FREQ_BINS],
    pub grad: [f64; GRAD_BINS],
    pub tex: [f64; TEX_KERNELS],
    pub color: [f64; 3 * COLOR_BINS],
}

impl Descriptor {
    pub fn zeros() -> Self {
        Descriptor {
            freq: [0.0; FREQ_BINS],
            grad: [0.0; GRAD_BINS],
            tex: [0.0; TEX_KERNELS],
            color: [0.0; 3 * COLOR_BINS],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(DESCRIPTOR_DIM);
        v.extend_from_slice(&self.freq);
        v.extend_from_slice(&self.grad);
        v.extend_from_slice(&self.tex);
        v.extend_from_slice(&self.color);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != DESCRIPTOR_DIM {
            return Err(Error::invalid(format!(
                "descriptor needs {DESCRIPTOR_DIM} values, got {}",
                v.len()
            )));
        }
        let mut d = Descriptor::zeros();
        let (a, rest) = v.split_at(FREQ_BINS);
        let (b, rest) = rest.split_at(GRAD_BINS);
        let (c, e) = rest.split_at(TEX_KERNELS);
        d.freq.copy_from_slice(a);
        d.grad.copy_from_slice(b);
        d.tex.copy_from_slice(c);
        d.color.copy_from_slice(e);
        Ok(d)
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn normalize_block(block: &mut [f64]) {
    let n = block.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < BLOCK_GUARD {
        block.iter_mut().for_each(|x| *x = 0.0);
    } else {
        block.iter_mut().for_each(|x| *x /= n);
    }
}

/// Row-major luminance plane.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

fn hann(n: usize, len: usize) -> f64 {
    if len < 2 {
        return 1.0;
    }
    0.5 * (1.0 - (2.0 * PI * n as f64 / (len - 1) as f64).cos())
}

/// Normalized radial frequency `sqrt(fx² + fy²)` (cycles per pixel) of DFT
/// bin `(u, v)` on a `w × h` grid.
fn radial_frequency(u: usize, v: usize, w: usize, h: usize) -> f64 {
    let signed = |k: usize, n: usize| -> f64 {
        let k = k as f64;
        let n = n as f64;
        if k > n / 2.0 {
            (k - n) / n
        } else {
            k / n
        }
    };
    signed(u, w).hypot(signed(v, h))
}

fn radial_bin(r: f64) -> Option<usize> {
    let b = (r / 0.5 * FREQ_BINS as f64).floor();
    (b < FREQ_BINS as f64).then_some(b as usize)
}

fn power_spectrum(lum: &Plane) -> Vec<f64> {
    let (w, h) = (lum.w, lum.h);
    let mean = lum.v.iter().sum::<f64>() / lum.v.len() as f64;
    let mut buf: Vec<Complex<f64>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| Complex::new((lum.at(x, y) - mean) * hann(x, w) * hann(y, h), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf.iter().map(|c| c.norm_sqr()).collect()
}

fn frequency_block(lum: &Plane) -> [f64; FREQ_BINS] {
    let power = power_spectrum(lum);
    let mut bins = [0.0; FREQ_BINS];
    for v in 0..lum.h {
        for u in 0..lum.w {
            if let Some(b) = radial_bin(radial_frequency(u, v, lum.w, lum.h)) {
                bins[b] += power[v * lum.w + u];
            }
        }
    }
    bins
}

fn gradient_block(lum: &Plane) -> [f64; GRAD_BINS] {
    let mut hist = [0.0; GRAD_BINS];
    for s in [1usize, 2] {
        for y in s..lum.h.saturating_sub(s) {
            for x in s..lum.w.saturating_sub(s) {
                let p = |dx: isize, dy: isize| {
                    lum.at((x as isize + dx * s as isize) as usize, (y as isize + dy * s as isize) as usize)
                };
                let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
                let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let angle = gy.atan2(gx).rem_euclid(2.0 * PI);
                let b = ((angle / (2.0 * PI) * GRAD_BINS as f64) as usize).min(GRAD_BINS - 1);
                hist[b] += mag;
            }
        }
    }
    hist
}

type Kernel = [[f64; 5]; 5];

/// Four orientations of edge (first derivative), bar (second derivative),
/// spot (mixed derivative of an elongated Gaussian) and elongated Laplacian-of-Gaussian kernels.
/// Every kernel is exactly zero-mean and has unit L1 norm.
fn texture_bank() -> &'static [Kernel; TEX_KERNELS] {
    static BANK: OnceLock<[Kernel; TEX_KERNELS]> = OnceLock::new();
    BANK.get_or_init(|| {
        let mut bank = [[[0.0; 5]; 5]; TEX_KERNELS];
        for (o, theta) in (0..4).map(|o| (o, o as f64 * PI / 4.0)) {
            let (c, s) = (theta.cos(), theta.sin());
            for (family, kernel) in bank.iter_mut().skip(o * 4).take(4).enumerate() {
                for (j, row) in kernel.iter_mut().enumerate() {
                    for (i, k) in row.iter_mut().enumerate() {
                        let (x, y) = (i as f64 - 2.0, j as f64 - 2.0);
                        let (u, v) = (c * x + s * y, -s * x + c * y);
                        let g = (-(u * u + v * v) / 2.0).exp();
                        *k = match family {
                            0 => -u * g,
                            1 => (u * u - 1.0) * g,
                            2 => u * v * (-(u * u / 1.44 + v * v / 0.64) / 2.0).exp(),
                            _ => {
                                let (su, sv) = (1.0, 0.6);
                                let ga = (-(u * u / (su * su) + v * v / (sv * sv)) / 2.0).exp();
                                (u * u / su.powi(4) - 1.0 / (su * su) + v * v / sv.powi(4) - 1.0 / (sv * sv)) * ga
                            }
                        };
                    }
                }
                let mean = kernel.iter().flatten().sum::<f64>() / 25.0;
                kernel.iter_mut().flatten().for_each(|k| *k -= mean);
                let l1 = kernel.iter().flatten().map(|k| k.abs()).sum::<f64>();
                kernel.iter_mut().flatten().for_each(|k| *k /= l1);
            }
        }
        bank
    })
}

fn texture_block(lum: &Plane) -> [f64; TEX_KERNELS] {
    let mut out = [0.0; TEX_KERNELS];
    let count = ((lum.w - 4) * (lum.h - 4)) as f64;
    for (slot, kernel) in out.iter_mut().zip(texture_bank()) {
        let mut acc = 0.0;
        for y in 0..lum.h - 4 {
            for x in 0..lum.w - 4 {
                let mut r = 0.0;
                for (j, row) in kernel.iter().enumerate() {
                    for (i, k) in row.iter().enumerate() {
                        r += k * lum.at(x + i, y + j);
                    }
                }
                acc += r.abs();
            }
        }
        *slot = acc / count;
    }
    out
}

fn color_block<T: Real>(image: &Image<T>) -> [f64; 3 * COLOR_BINS] {
    let mut hist = [0.0; 3 * COLOR_BINS];
    for px in image.data.chunks_exact(3) {
        for (c, v) in px.iter().enumerate() {
            let v = v.as_f64().clamp(0.0, 1.0);
            let b = ((v * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
            hist[c * COLOR_BINS + b] += 1.0;
        }
    }
    let n = (image.width * image.height) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    hist
}

/// Computes the descriptor of an RGB image with values in `[0, 1]`.
pub fn extract_descriptor<T: Real>(image: &Image<T>) -> Result<Descriptor> {
    if image.channels != 3 {
        return Err(Error::invalid("descriptor needs a 3-channel image"));
    }
    if image.width < MIN_IMAGE_SIDE || image.height < MIN_IMAGE_SIDE {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
            image.width, image.height
        )));
    }
    let lum = Plane {
        w: image.width,
        h: image.height,
        v: image.luminance()?.data.iter().map(|v| v.as_f64()).collect(),
    };
    let mut d = Descriptor {
        freq: frequency_block(&lum),
        grad: gradient_block(&lum),
        tex: texture_block(&lum),
        color: color_block(image),
    };
    normalize_block(&mut d.freq);
    normalize_block(&mut d.grad);
    normalize_block(&mut d.tex);
    normalize_block(&mut d.color);
    Ok(d)
}

/// `S_cos + S_euc` with `S_cos = ½(1 + cos∠(a, b))` and
/// `S_euc = exp(−‖a − b‖₂)`. Two zero descriptors have similarity 0.
pub fn descriptor_similarity(a: &Descriptor, b: &Descriptor) -> f64 {
    let (va, vb) = (a.to_vec(), b.to_vec());
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let cos = if na > 0.0 && nb > 0.0 {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let dist = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    0.5 * (1.0 + cos) + (-dist).exp()
}

const HEADER_PREFIX: &str = "descriptors";

/// Writes `descriptors <count> <dim> f64le` followed by the raw records.
pub fn write_descriptors<W: Write>(descriptors: &[Descriptor], mut out: W) -> Result<()> {
    writeln!(out, "{HEADER_PREFIX} {} {DESCRIPTOR_DIM} f64le", descriptors.len())?;
    let mut body = Vec::with_capacity(descriptors.len() * DESCRIPTOR_DIM * 8);
    for d in descriptors {
        for v in d.to_vec() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn read_descriptors<R: BufRead>(mut input: R) -> Result<Vec<Descriptor>> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let count = match fields.as_slice() {
        [p, n, d, "f64le"] if *p == HEADER_PREFIX && d.parse::<usize>().ok() == Some(DESCRIPTOR_DIM) => n
            .parse::<usize>()
            .map_err(|_| Error::parse(1, "bad descriptor count"))?,
        _ => return Err(Error::parse(1, format!("bad descriptor header '{}'", header.trim_end()))),
    };
    let mut body = vec![0u8; count * DESCRIPTOR_DIM * 8];
    input.read_exact(&mut body)?;
    body.chunks_exact(DESCRIPTOR_DIM * 8)
        .map(|rec| {
            let v: Vec<f64> = rec
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Descriptor::from_slice(&v)
        })
        .collect()
}
