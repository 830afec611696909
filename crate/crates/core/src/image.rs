//! Dense row-major images and their file formats.
//!
//! Color images are written as binary PPM (P6, 8 bit). Depth images use a
//! 16-byte header (`MIPD`, width, height, reserved; little-endian `u32`)
//! followed by `f32` samples. Both can also be dumped as text matrices.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

const DEPTH_MAGIC: &[u8; 4] = b"MIPD";

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved, row-major: `data[(row * width + col) * channels + c]`.
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, channel: usize) -> T {
        self.data[self.index(col, row, channel)]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, channel: usize, value: T) {
        let i = self.index(col, row, channel);
        self.data[i] = value;
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[T] {
        let i = self.index(col, row, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map<U, F: Fn(T) -> U>(&self, f: F) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    /// Luminance `0.299 R + 0.587 G + 0.114 B` of a 3-channel image.
    pub fn luminance(&self) -> Result<Image<T>> {
        if self.channels != 3 {
            return Err(Error::invalid("luminance needs a 3-channel image"));
        }
        let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| r * p[0] + g * p[1] + b * p[2])
            .collect();
        Image::from_vec(self.width, self.height, 1, data)
    }

    /// Averages non-overlapping `factor × factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<Image<T>> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::zeros(w, h, self.channels);
        let norm = T::one() / T::from_count(factor * factor);
        for row in 0..h {
            for col in 0..w {
                for c in 0..self.channels {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(col * factor + dx, row * factor + dy, c);
                        }
                    }
                    out.set(col, row, c, acc * norm);
                }
            }
        }
        Ok(out)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm<T: Real, W: Write>(img: &Image<T>, mut out: W) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid("PPM output needs 3 channels"));
    }
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize(v.as_f64())).collect();
    out.write_all(&bytes)?;
    Ok(())
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(0, "malformed PPM header"))
}

pub fn read_ppm<T: Real, R: Read>(mut input: R) -> Result<Image<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::parse(1, "not a binary PPM"));
    }
    let mut pos = 2;
    let width = ppm_token(&bytes, &mut pos)?;
    let height = ppm_token(&bytes, &mut pos)?;
    let maxval = ppm_token(&bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::parse(1, "only 8-bit PPM is supported"));
    }
    pos += 1;
    let n = width * height * 3;
    let body = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::parse(0, "truncated PPM data"))?;
    let data = body.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    Image::from_vec(width, height, 3, data)
}

pub fn write_depth<T: Real, W: Write>(img: &Image<T>, mut out: W) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::invalid("depth output needs 1 channel"));
    }
    let dim = |n: usize| u32::try_from(n).map_err(|_| Error::invalid("image too large"));
    out.write_all(DEPTH_MAGIC)?;
    out.write_all(&dim(img.width)?.to_le_bytes())?;
    out.write_all(&dim(img.height)?.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    let mut body = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        body.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn read_depth<T: Real, R: Read>(mut input: R) -> Result<Image<T>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != DEPTH_MAGIC {
        return Err(Error::parse(0, "missing MIPD magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (width, height) = (word(4), word(8));
    let mut body = vec![0u8; width * height * 4];
    input.read_exact(&mut body)?;
    let data = body
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Image::from_vec(width, height, 1, data)
}

/// One text row per image row; channels of a pixel are separated by commas
/// and pixels by spaces.
pub fn write_text_matrix<T: Real, W: Write>(img: &Image<T>, mut out: W) -> Result<()> {
    for row in 0..img.height {
        let line: Vec<String> = (0..img.width)
            .map(|col| {
                img.pixel(col, row)
                    .iter()
                    .map(|v| format!("{:.9e}", v.as_f64()))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn save_ppm<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(img, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_ppm<T: Real>(path: &Path) -> Result<Image<T>> {
    read_ppm(std::fs::File::open(path)?)
}

pub fn save_depth<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_depth(img, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_depth<T: Real>(path: &Path) -> Result<Image<T>> {
    read_depth(std::fs::File::open(path)?)
}
