//! Text serialization of scenes and cameras (TOML documents).
//!
//! A scene document looks like
//!
//! ```toml
//! background_color = [0.0, 0.0, 0.0]
//!
//! [[gaussians]]
//! center = [0.0, 0.0, 2.0]
//! quaternion = [1.0, 0.0, 0.0, 0.0] # w, x, y, z
//! scales = [0.1, 0.1, 0.1]
//! opacity = 0.9
//! color = [1.0, 0.5, 0.2]
//! sampling_frequency = 0.0
//! ```
//!
//! and a camera document carries `fx, fy, cx, cy, width, height` plus `pose`,
//! a row-major 4×4 camera-to-world matrix given as four rows.

use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, Scene};
use crate::lie::Se3;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDoc {
    pub center: [f64; 3],
    pub quaternion: [f64; 4],
    pub scales: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    #[serde(default)]
    pub sampling_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub background_color: [f64; 3],
    #[serde(default)]
    pub gaussians: Vec<GaussianDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: [[f64; 4]; 4],
}

/// A list of cameras in one document, `[[cameras]]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraListDoc {
    pub cameras: Vec<CameraDoc>,
}

fn v3<T: Real>(a: [f64; 3]) -> Vector3<T> {
    Vector3::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]))
}

fn a3<T: Real>(v: &Vector3<T>) -> [f64; 3] {
    [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()]
}

impl GaussianDoc {
    pub fn from_gaussian<T: Real>(g: &Gaussian3D<T>) -> Self {
        let q = g.orientation.as_ref();
        GaussianDoc {
            center: a3(&g.center),
            quaternion: [q.w.as_f64(), q.i.as_f64(), q.j.as_f64(), q.k.as_f64()],
            scales: a3(&g.scales),
            opacity: g.opacity.as_f64(),
            color: a3(&g.color),
            sampling_frequency: g.sampling_frequency.as_f64(),
        }
    }

    pub fn to_gaussian<T: Real>(&self) -> Result<Gaussian3D<T>> {
        let q = Gaussian3D::<T>::quaternion_from_wxyz(self.quaternion.map(T::lit))?;
        let mut g = Gaussian3D::new(
            v3(self.center),
            q,
            v3(self.scales),
            T::lit(self.opacity),
            v3(self.color),
        )?;
        g.sampling_frequency = T::lit(self.sampling_frequency);
        g.validate()?;
        Ok(g)
    }
}

impl SceneDoc {
    pub fn from_scene<T: Real>(scene: &Scene<T>) -> Self {
        SceneDoc {
            background_color: a3(&scene.background_color),
            gaussians: scene.gaussians.iter().map(GaussianDoc::from_gaussian).collect(),
        }
    }

    pub fn to_scene<T: Real>(&self) -> Result<Scene<T>> {
        let gaussians = self
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.to_gaussian()
                    .map_err(|e| Error::invalid(format!("gaussian {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = Scene::new(gaussians, v3(self.background_color));
        scene.validate()?;
        Ok(scene)
    }
}

impl CameraDoc {
    pub fn from_camera<T: Real>(cam: &Camera<T>) -> Self {
        let m = cam.pose.to_matrix();
        let mut pose = [[0.0; 4]; 4];
        for (r, row) in pose.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)].as_f64();
            }
        }
        CameraDoc {
            fx: cam.fx.as_f64(),
            fy: cam.fy.as_f64(),
            cx: cam.cx.as_f64(),
            cy: cam.cy.as_f64(),
            width: cam.width,
            height: cam.height,
            pose,
        }
    }

    pub fn to_camera<T: Real>(&self) -> Result<Camera<T>> {
        let m = Matrix4::from_fn(|r, c| T::lit(self.pose[r][c]));
        let pose = Se3::from_matrix(&m)?;
        Camera::new(
            T::lit(self.fx),
            T::lit(self.fy),
            T::lit(self.cx),
            T::lit(self.cy),
            self.width,
            self.height,
            pose,
        )
    }
}

fn to_toml<S: Serialize>(doc: &S) -> Result<String> {
    toml::to_string(doc).map_err(|e| Error::invalid(format!("serialization failed: {e}")))
}

fn from_toml<S: for<'de> Deserialize<'de>>(text: &str) -> Result<S> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0);
        Error::parse(line, e.message().to_string())
    })
}

pub fn scene_to_string<T: Real>(scene: &Scene<T>) -> Result<String> {
    to_toml(&SceneDoc::from_scene(scene))
}

pub fn scene_from_str<T: Real>(text: &str) -> Result<Scene<T>> {
    from_toml::<SceneDoc>(text)?.to_scene()
}

pub fn camera_to_string<T: Real>(cam: &Camera<T>) -> Result<String> {
    to_toml(&CameraDoc::from_camera(cam))
}

pub fn camera_from_str<T: Real>(text: &str) -> Result<Camera<T>> {
    from_toml::<CameraDoc>(text)?.to_camera()
}

pub fn cameras_to_string<T: Real>(cams: &[Camera<T>]) -> Result<String> {
    to_toml(&CameraListDoc {
        cameras: cams.iter().map(CameraDoc::from_camera).collect(),
    })
}

pub fn cameras_from_str<T: Real>(text: &str) -> Result<Vec<Camera<T>>> {
    from_toml::<CameraListDoc>(text)?
        .cameras
        .iter()
        .map(CameraDoc::to_camera)
        .collect()
}

pub fn save_scene<T: Real>(path: &Path, scene: &Scene<T>) -> Result<()> {
    std::fs::write(path, scene_to_string(scene)?)?;
    Ok(())
}

pub fn load_scene<T: Real>(path: &Path) -> Result<Scene<T>> {
    scene_from_str(&std::fs::read_to_string(path)?)
}

pub fn save_camera<T: Real>(path: &Path, cam: &Camera<T>) -> Result<()> {
    std::fs::write(path, camera_to_string(cam)?)?;
    Ok(())
}

pub fn load_camera<T: Real>(path: &Path) -> Result<Camera<T>> {
    camera_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{se3_exp, Twist};
    use nalgebra::UnitQuaternion;

    #[test]
    fn scene_round_trip() {
        let mut g = Gaussian3D::new(
            Vector3::new(0.1, -0.2, 2.5),
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vector3::new(0.05, 0.1, 0.02),
            0.8,
            Vector3::new(0.9, 0.1, 0.4),
        )
        .unwrap();
        g.sampling_frequency = 312.5;
        let scene = Scene::new(vec![g], Vector3::new(0.1, 0.2, 0.3));
        let text = scene_to_string(&scene).unwrap();
        assert!(text.contains("quaternion"));
        let back: Scene<f64> = scene_from_str(&text).unwrap();
        assert_eq!(back.background_color, scene.background_color);
        let (a, b) = (&scene.gaussians[0], &back.gaussians[0]);
        assert_eq!(a.center, b.center);
        assert_eq!(a.scales, b.scales);
        assert_eq!(a.sampling_frequency, b.sampling_frequency);
        assert!((a.orientation.as_ref() - b.orientation.as_ref()).norm() < 1e-15);
    }

    #[test]
    fn camera_round_trip() {
        let pose = se3_exp(&Twist::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.4, -0.1, 0.2)))
            .unwrap();
        let cam = Camera::new(300.0, 310.0, 128.0, 120.0, 256, 240, pose).unwrap();
        let back: Camera<f64> = camera_from_str(&camera_to_string(&cam).unwrap()).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn malformed_document_reports_parse_error() {
        let err = scene_from_str::<f64>("background_color = [0.0, 0.0]\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let bad_quat = "background_color = [0.0, 0.0, 0.0]\n[[gaussians]]\ncenter = [0.0, 0.0, 1.0]\nquaternion = [2.0, 0.0, 0.0, 0.0]\nscales = [0.1, 0.1, 0.1]\nopacity = 0.5\ncolor = [0.0, 0.0, 0.0]\n";
        assert!(matches!(scene_from_str::<f64>(bad_quat), Err(Error::InvalidArgument(_))));
    }
}
