use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::lie::Se3;
use crate::scalar::Real;

/// Pinhole camera. `pose` maps camera coordinates to world coordinates.
///
/// Pixel `(col, row)` covers `[col, col+1) × [row, row+1)`; its center is at
/// `(col + ½, row + ½)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    pub pose: Se3<T>,
}

impl<T: Real> Camera<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize, pose: Se3<T>) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image center.
    pub fn centered(focal: T, width: usize, height: usize, pose: Se3<T>) -> Result<Self> {
        let half = T::lit(0.5);
        Self::new(
            focal,
            focal,
            T::from_count(width) * half,
            T::from_count(height) * half,
            width,
            height,
            pose,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("non-finite principal point"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("resolution must be at least 1x1"));
        }
        self.pose.validate()
    }

    pub fn world_to_camera(&self) -> Se3<T> {
        self.pose.inverse()
    }

    /// Projects a camera-frame point onto the image plane.
    pub fn project(&self, p_cam: &Vector3<T>) -> Vector2<T> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Multiplies intrinsics and resolution by `scale` (resolution rounded,
    /// at least one pixel). Emulates a focal length change at fixed pose.
    pub fn scaled(&self, scale: T) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(Error::invalid("scale must be positive"));
        }
        let dim = |n: usize| -> usize {
            let v = (T::from_count(n) * scale).round().as_f64();
            (v as usize).max(1)
        };
        Camera::new(
            self.fx * scale,
            self.fy * scale,
            self.cx * scale,
            self.cy * scale,
            dim(self.width),
            dim(self.height),
            self.pose,
        )
    }

    pub fn with_pose(&self, pose: Se3<T>) -> Self {
        Camera { pose, ..*self }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Geometric mean of the two focal lengths, used as `f_n` in the
    /// sampling frequency update.
    pub fn focal(&self) -> T {
        (self.fx * self.fy).sqrt()
    }
}
