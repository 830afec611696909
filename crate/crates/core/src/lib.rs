pub mod camera;
pub mod covisibility;
pub mod descriptor;
pub mod error;
pub mod format;
pub mod gaussian;
pub mod image;
pub mod lie;
pub mod optimize;
pub mod pgo;
pub mod projection;
pub mod quadrature;
pub mod render;
pub mod scalar;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Gaussian = gaussian::Gaussian3D<f64>;
pub type Scene = gaussian::Scene<f64>;
pub type Camera = camera::Camera<f64>;
pub type Pose = lie::Se3<f64>;
pub type Image = image::Image<f64>;
pub type PoseNode = pgo::PoseNode<f64>;
pub type PoseEdge = pgo::PoseEdge<f64>;

pub type GaussianF32 = gaussian::Gaussian3D<f32>;
pub type SceneF32 = gaussian::Scene<f32>;
pub type CameraF32 = camera::Camera<f32>;
pub type PoseF32 = lie::Se3<f32>;
pub type ImageF32 = image::Image<f32>;
