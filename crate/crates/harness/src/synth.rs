//! Seeded synthetic scenes, trajectories and supersampled ground truth.

use easlam_core::camera::Camera;
use easlam_core::gaussian::{Gaussian3D, Scene};
use easlam_core::image::Image;
use easlam_core::lie::{se3_exp, Se3, Twist};
use easlam_core::pgo::{EdgeKind, PoseEdge};
use easlam_core::render::{render, AlphaMode, RenderConfig};
use easlam_core::{Error, Result};
use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryShape {
    Circle,
    Lissajous,
    Line,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub shape: TrajectoryShape,
    /// Meters.
    pub radius: f64,
    /// Camera height above the scene center, meters.
    pub height: f64,
    pub pose_count: usize,
    /// Odometry translation noise per axis, meters.
    pub sigma_t: f64,
    /// Odometry rotation noise per axis, radians.
    pub sigma_r: f64,
    /// Exact loop-closure edges between these pose indices.
    pub loop_pairs: Vec<(usize, usize)>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            shape: TrajectoryShape::Circle,
            radius: 1.8,
            height: 0.5,
            pose_count: 100,
            sigma_t: 0.01,
            sigma_r: 0.5f64.to_radians(),
            loop_pairs: vec![(0, 99), (5, 55), (20, 70), (35, 85), (45, 95)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseCamera {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for BaseCamera {
    fn default() -> Self {
        BaseCamera {
            focal: 256.0,
            width: 256,
            height: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub gaussian_count: usize,
    /// Side of the cube holding the Gaussian centers, meters.
    pub extent: f64,
    /// Per-axis standard deviations are drawn log-uniformly from this range, meters.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub palette_seed: u64,
    pub palette_size: usize,
    pub background: [f64; 3],
    pub trajectory: TrajectorySpec,
    pub camera: BaseCamera,
    /// Number of evenly spaced trajectory poses that get ground-truth renders.
    pub views: usize,
    pub supersample: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            gaussian_count: 800,
            extent: 1.0,
            scale_range: (0.004, 0.03),
            opacity_range: (0.4, 0.95),
            palette_seed: 7,
            palette_size: 6,
            background: [0.0, 0.0, 0.0],
            trajectory: TrajectorySpec::default(),
            camera: BaseCamera::default(),
            views: 4,
            supersample: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let t = &self.trajectory;
        if self.gaussian_count == 0 || t.pose_count == 0 || self.palette_size == 0 || self.supersample == 0 {
            return Err(Error::InvalidConfig("counts must be at least 1".into()));
        }
        if self.camera.width == 0 || self.camera.height == 0 || !(self.camera.focal > 0.0) {
            return Err(Error::InvalidConfig("base camera needs positive focal and resolution".into()));
        }
        if !(self.extent > 0.0 && t.radius > 0.0) {
            return Err(Error::InvalidConfig("extent and radius must be positive".into()));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::InvalidConfig("scale range must be positive and ordered".into()));
        }
        let (o0, o1) = self.opacity_range;
        if !(o0 > 0.0 && o1 >= o0 && o1 <= 1.0) {
            return Err(Error::InvalidConfig("opacity range must lie in (0, 1] and be ordered".into()));
        }
        if !(t.sigma_t >= 0.0 && t.sigma_r >= 0.0) {
            return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
        }
        if t.loop_pairs.iter().any(|&(a, b)| a >= t.pose_count || b >= t.pose_count || a == b) {
            return Err(Error::InvalidConfig("loop pairs must name two distinct existing poses".into()));
        }
        Ok(())
    }

    pub fn base_camera(&self, pose: Se3<f64>) -> Result<Camera<f64>> {
        Camera::centered(self.camera.focal, self.camera.width, self.camera.height, pose)
    }
}

/// Camera-to-world pose at `eye` whose optical axis points at `target`, with
/// image rows running along world −z.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Se3<f64>> {
    let z = (target - eye).normalize();
    let up = Vector3::z();
    let x = z.cross(&up);
    if !(x.norm() > 1e-9) {
        return Err(Error::InvalidArgument("viewing direction parallel to world up".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Se3::new(Matrix3::from_columns(&[x, y, z]), eye)
}

pub fn trajectory_poses(spec: &TrajectorySpec) -> Result<Vec<Se3<f64>>> {
    let n = spec.pose_count;
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let s = i as f64 / n as f64;
            let eye = match spec.shape {
                TrajectoryShape::Circle => {
                    let a = tau * s;
                    Vector3::new(spec.radius * a.cos(), spec.radius * a.sin(), spec.height)
                }
                TrajectoryShape::Lissajous => {
                    let a = tau * s;
                    let r = spec.radius * (1.0 + 0.15 * (2.0 * a).sin());
                    Vector3::new(r * a.cos(), r * a.sin(), spec.height + 0.1 * spec.radius * (3.0 * a).sin())
                }
                TrajectoryShape::Line => {
                    let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                    Vector3::new(spec.radius * (u - 0.5), -spec.radius, spec.height)
                }
            };
            look_at(eye, Vector3::zeros())
        })
        .collect()
}

pub struct SyntheticScene {
    pub scene: Scene<f64>,
    pub cameras: Vec<Camera<f64>>,
    /// `(color, depth)` per camera.
    pub ground_truth: Vec<(Image<f64>, Image<f64>)>,
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

pub fn generate_scene(spec: &SynthSpec, seed: u64) -> Result<Scene<f64>> {
    spec.validate()?;
    let mut palette_rng = ChaCha8Rng::seed_from_u64(spec.palette_seed);
    let palette: Vec<Vector3<f64>> = (0..spec.palette_size)
        .map(|_| Vector3::from_fn(|_, _| palette_rng.random_range(0.1..0.95)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = spec.extent / 2.0;
    let (ls0, ls1) = (spec.scale_range.0.ln(), spec.scale_range.1.ln());
    let gaussians = (0..spec.gaussian_count)
        .map(|_| {
            let center = Vector3::from_fn(|_, _| rng.random_range(-half..=half));
            let orientation = random_unit_quaternion(&mut rng);
            let scales = Vector3::from_fn(|_, _| rng.random_range(ls0..=ls1).exp());
            let opacity = rng.random_range(spec.opacity_range.0..=spec.opacity_range.1);
            let base = palette[rng.random_range(0..palette.len())];
            let color = base.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
            Gaussian3D::new(center, orientation, scales, opacity, color)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene::new(gaussians, Vector3::from(spec.background)))
}

/// Reference render independent of the quadrature path: point sampling at
/// `supersample`× resolution with the 3D filter off, then box-downsampled.
pub fn ground_truth(scene: &Scene<f64>, cam: &Camera<f64>, supersample: usize) -> Result<(Image<f64>, Image<f64>)> {
    if supersample == 0 {
        return Err(Error::InvalidArgument("supersampling factor must be at least 1".into()));
    }
    let big = Camera::new(
        cam.fx * supersample as f64,
        cam.fy * supersample as f64,
        cam.cx * supersample as f64,
        cam.cy * supersample as f64,
        cam.width * supersample,
        cam.height * supersample,
        cam.pose,
    )?;
    let cfg = RenderConfig {
        alpha_mode: AlphaMode::PointSample,
        filter_constant: 0.0,
        ..RenderConfig::default()
    };
    let frame = render(scene, &big, &cfg)?;
    Ok((frame.color.box_downsample(supersample)?, frame.depth.box_downsample(supersample)?))
}

/// Evenly spaced poses of the trajectory used as benchmark views.
pub fn view_cameras(spec: &SynthSpec) -> Result<Vec<Camera<f64>>> {
    let poses = trajectory_poses(&spec.trajectory)?;
    let views = spec.views.clamp(1, poses.len());
    (0..views)
        .map(|v| spec.base_camera(poses[v * poses.len() / views]))
        .collect()
}

pub fn generate_synthetic_scene(spec: &SynthSpec, seed: u64) -> Result<SyntheticScene> {
    let scene = generate_scene(spec, seed)?;
    let cameras = view_cameras(spec)?;
    let ground_truth = cameras
        .iter()
        .map(|c| ground_truth(&scene, c, spec.supersample))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        scene,
        cameras,
        ground_truth,
    })
}

#[derive(Clone, Debug)]
pub struct SyntheticTrajectory {
    pub truth: Vec<Se3<f64>>,
    pub timestamps: Vec<f64>,
    /// Edge `i` links pose `i` to `i + 1`.
    pub odometry: Vec<PoseEdge<f64>>,
    pub loops: Vec<PoseEdge<f64>>,
}

/// Diagonal information matching the noise model; zero noise is floored at
/// 1 mm / 1 mrad.
pub fn odometry_information(sigma_t: f64, sigma_r: f64) -> Matrix6<f64> {
    let it = 1.0 / sigma_t.max(1e-3).powi(2);
    let ir = 1.0 / sigma_r.max(1e-3).powi(2);
    Matrix6::from_diagonal(&Vector6::new(it, it, it, ir, ir, ir))
}

pub fn generate_trajectory(spec: &TrajectorySpec, seed: u64) -> Result<SyntheticTrajectory> {
    if spec.pose_count == 0 || !(spec.sigma_t >= 0.0 && spec.sigma_r >= 0.0) {
        return Err(Error::InvalidConfig("trajectory needs poses and non-negative noise".into()));
    }
    let truth = trajectory_poses(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = Normal::new(0.0, spec.sigma_t).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let nr = Normal::new(0.0, spec.sigma_r).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let info = odometry_information(spec.sigma_t, spec.sigma_r);
    let mut odometry = Vec::with_capacity(truth.len().saturating_sub(1));
    for i in 0..truth.len().saturating_sub(1) {
        let t = Vector3::from_fn(|_, _| nt.sample(&mut rng));
        let r = Vector3::from_fn(|_, _| nr.sample(&mut rng));
        let noise = se3_exp(&Twist::new(t, r))?;
        odometry.push(PoseEdge {
            from: i as u64,
            to: i as u64 + 1,
            measured_relative: truth[i].between(&truth[i + 1]) * noise,
            information: info,
            confidence: 1.0,
            kind: EdgeKind::Odometry,
        });
    }
    let loops = spec
        .loop_pairs
        .iter()
        .filter(|&&(a, b)| a < truth.len() && b < truth.len() && a != b)
        .map(|&(a, b)| PoseEdge {
            from: a as u64,
            to: b as u64,
            measured_relative: truth[a].between(&truth[b]),
            information: info,
            confidence: 1.0,
            kind: EdgeKind::Loop,
        })
        .collect();
    Ok(SyntheticTrajectory {
        timestamps: (0..truth.len()).map(|i| i as f64).collect(),
        truth,
        odometry,
        loops,
    })
}

impl SyntheticTrajectory {
    /// Dead-reckoned poses: the first ground-truth pose composed with every
    /// odometry measurement in turn.
    pub fn integrate_odometry(&self) -> Vec<Se3<f64>> {
        let mut out = Vec::with_capacity(self.truth.len());
        if let Some(first) = self.truth.first() {
            out.push(*first);
            for e in &self.odometry {
                let last = *out.last().expect("non-empty");
                out.push((last * e.measured_relative).renormalized());
            }
        }
        out
    }

    pub fn edges(&self) -> Vec<PoseEdge<f64>> {
        self.odometry.iter().chain(&self.loops).cloned().collect()
    }
}
