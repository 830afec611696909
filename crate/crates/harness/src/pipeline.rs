//! End-to-end run: synthetic world, tracking, keyframe map refinement,
//! spectral signatures, SA-PGO and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use easlam_core::camera::Camera;
use easlam_core::covisibility::CovisibilityGraph;
use easlam_core::descriptor::extract_descriptor;
use easlam_core::format::save_scene;
use easlam_core::gaussian::Scene;
use easlam_core::image::save_ppm;
use easlam_core::lie::Se3;
use easlam_core::optimize::{refine_map, track_pose, Keyframe, RefineConfig, TrackConfig};
use easlam_core::pgo::{write_g2o, EdgeKind, PoseEdge, PoseNode, SolverConfig};
use easlam_core::projection::{project_gaussian, update_sampling_frequency};
use easlam_core::render::{render, RenderConfig, RenderedFrame};
use easlam_core::trajectory::{assign_signatures, pose_samples, trajectory_signatures, write_tum, SpectralConfig};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{run_sa_pgo, WeightOverride};
use crate::metrics::{compute_ate, compute_psnr};
use crate::synth::{generate_scene, generate_trajectory, odometry_information, BaseCamera, SynthSpec, TrajectorySpec};
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub keyframe_every: usize,
    pub keyframe_window: usize,
    /// Standard deviation of the initial map's center perturbation, meters.
    pub map_noise_position: f64,
    /// Standard deviation of the initial map's color perturbation.
    pub map_noise_color: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            keyframe_every: 5,
            keyframe_window: 4,
            map_noise_position: 0.002,
            map_noise_color: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub pipeline: PipelineSettings,
    pub synth: SynthSpec,
    pub render: RenderConfig,
    pub spectral: SpectralConfig,
    pub solver: SolverConfig,
    pub tracking: TrackConfig,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            pipeline: PipelineSettings::default(),
            synth: SynthSpec {
                gaussian_count: 250,
                camera: BaseCamera {
                    focal: 48.0,
                    width: 48,
                    height: 48,
                },
                trajectory: TrajectorySpec {
                    pose_count: 40,
                    sigma_t: 0.005,
                    sigma_r: 0.3f64.to_radians(),
                    loop_pairs: vec![(0, 39), (3, 35), (10, 30)],
                    ..TrajectorySpec::default()
                },
                ..SynthSpec::default()
            },
            render: RenderConfig::default(),
            spectral: SpectralConfig {
                window: 16,
                hop: 8,
                ..SpectralConfig::default()
            },
            solver: SolverConfig::default(),
            tracking: TrackConfig {
                iterations: 6,
                ..TrackConfig::default()
            },
            refine: RefineConfig {
                iterations: 2,
                ..RefineConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    /// Parses a config, with every key the file omits taken from
    /// [`PipelineConfig::default`] (nested tables merge key by key).
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let bad = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut base = toml::Table::try_from(PipelineConfig::default()).map_err(|e| bad(&e))?;
        merge_tables(&mut base, user);
        toml::Value::Table(base).try_into().map_err(|e| bad(&e))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.synth.validate()?;
        self.render.validate()?;
        self.spectral.validate()?;
        self.solver.validate()?;
        if self.pipeline.keyframe_every == 0 || self.pipeline.keyframe_window == 0 {
            return Err(HarnessError::Config("keyframe cadence and window must be at least 1".into()));
        }
        if !(self.pipeline.map_noise_position >= 0.0 && self.pipeline.map_noise_color >= 0.0) {
            return Err(HarnessError::Config("map noise must be non-negative".into()));
        }
        if self.synth.trajectory.pose_count < self.spectral.window.max(3) {
            return Err(HarnessError::Config(format!(
                "{} poses cannot fill a {}-pose spectral window",
                self.synth.trajectory.pose_count, self.spectral.window
            )));
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStat {
    pub index: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStat {
    pub keyframe: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgoSummary {
    pub fiedler: f64,
    pub lambda_spe: f64,
    pub lambda_smo: f64,
    pub tau_freq: f64,
    pub spectral_edges: usize,
    pub skipped_pairs: usize,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: bool,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub frames: usize,
    pub keyframes: Vec<usize>,
    pub ate_odometry: f64,
    pub ate_tracked: f64,
    pub ate_optimized: f64,
    pub map_psnr_db: f64,
    pub pgo: PgoSummary,
    pub tracking: Vec<FrameStat>,
    pub refinement: Vec<RefineStat>,
    pub config: PipelineConfig,
}

impl PipelineReport {
    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<22}{:>12}\n{:<22}{:>12}\n{:<22}{:>12.6}\n{:<22}{:>12.6}\n{:<22}{:>12.6}\n{:<22}{:>12.3}\n{:<22}{:>12.5}\n{:<22}{:>12}\n",
            "frames",
            self.frames,
            "keyframes",
            self.keyframes.len(),
            "ate_odometry_m",
            self.ate_odometry,
            "ate_tracked_m",
            self.ate_tracked,
            "ate_optimized_m",
            self.ate_optimized,
            "map_psnr_db",
            self.map_psnr_db,
            "fiedler",
            self.pgo.fiedler,
            "spectral_edges",
            self.pgo.spectral_edges
        )
    }
}

pub struct PipelineOutput {
    pub report: PipelineReport,
    /// Seconds per stage; kept out of the report so it stays reproducible.
    pub timings: BTreeMap<String, f64>,
}

struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn text(&self, name: &str, content: &str) -> Result<(), HarnessError> {
        if let Some(p) = self.path(name) {
            fs::write(p, content)?;
        }
        Ok(())
    }

    fn tum(&self, name: &str, poses: &[Se3<f64>], stamps: &[f64]) -> Result<(), HarnessError> {
        if let Some(p) = self.path(name) {
            let traj: Vec<(f64, Se3<f64>)> = stamps.iter().copied().zip(poses.iter().copied()).collect();
            let mut buf = Vec::new();
            write_tum(&traj, &mut buf)?;
            fs::write(p, buf)?;
        }
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: easlam_core::Result<T>) -> Result<T, HarnessError> {
    r.map_err(|source| HarnessError::Stage { stage: name, source })
}

fn visible_set(scene: &Scene<f64>, cam: &Camera<f64>, near: f64) -> BTreeSet<usize> {
    scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(g, cam, i, near)
                .and_then(|p| p.pixel_bounds(cam.width, cam.height))
                .map(|_| i)
        })
        .collect()
}

/// Raises each visible primitive's sampling frequency with this view.
fn observe(scene: &mut Scene<f64>, cam: &Camera<f64>, visible: &BTreeSet<usize>) -> easlam_core::Result<()> {
    let to_cam = cam.world_to_camera();
    for &i in visible {
        let g = &mut scene.gaussians[i];
        let depth = to_cam.transform_point(&g.center).z;
        g.sampling_frequency = update_sampling_frequency(g.sampling_frequency, &[(cam.focal(), depth)])?;
    }
    Ok(())
}

fn perturb_map(scene: &Scene<f64>, settings: &PipelineSettings, seed: u64) -> easlam_core::Result<Scene<f64>> {
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = |e: rand_distr::NormalError| easlam_core::Error::InvalidConfig(e.to_string());
    let np = Normal::new(0.0, settings.map_noise_position).map_err(bad)?;
    let nc = Normal::new(0.0, settings.map_noise_color).map_err(bad)?;
    for g in &mut out.gaussians {
        g.center += Vector3::from_fn(|_, _| np.sample(&mut rng));
        g.color = g.color.map(|c| (c + nc.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Runs every stage in order. Artifacts written before a failing stage are
/// left in `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutput, HarnessError> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let art = Artifacts {
        dir: out_dir.map(Path::to_path_buf),
    };
    art.text("config.toml", &cfg.to_toml()?)?;
    let mut timings = BTreeMap::new();
    let near = cfg.render.near_plane;

    // generate
    let t0 = Instant::now();
    let mut world = stage("generate", generate_scene(&cfg.synth, cfg.seed))?;
    let traj = stage("generate", generate_trajectory(&cfg.synth.trajectory, cfg.seed.wrapping_add(1)))?;
    let cameras: Vec<Camera<f64>> = stage(
        "generate",
        traj.truth.iter().map(|p| cfg.synth.base_camera(*p)).collect(),
    )?;
    // The sensor's own resolution limit: every ground-truth view observes the world.
    for cam in &cameras {
        let vis = visible_set(&world, cam, near);
        stage("generate", observe(&mut world, cam, &vis))?;
    }
    let mut map = stage(
        "generate",
        perturb_map(&world, &cfg.pipeline, cfg.seed.wrapping_add(2)),
    )?;
    let observations: Vec<RenderedFrame<f64>> =
        stage("generate", cameras.iter().map(|c| render(&world, c, &cfg.render)).collect())?;
    let odometry_poses = traj.integrate_odometry();
    art.tum("truth.tum", &traj.truth, &traj.timestamps)?;
    art.tum("odometry.tum", &odometry_poses, &traj.timestamps)?;
    timings.insert("generate".to_string(), t0.elapsed().as_secs_f64());

    // track + map
    let t0 = Instant::now();
    let mut refine_time = 0.0;
    let n = cameras.len();
    let mut estimates = vec![traj.truth[0]];
    let mut tracking = Vec::new();
    let mut refinement = Vec::new();
    let mut keyframes: Vec<Keyframe<f64>> = Vec::new();
    let mut keyframe_ids = Vec::new();
    let mut covis = CovisibilityGraph::new();
    for i in 0..n {
        if i > 0 {
            let init = (estimates[i - 1] * traj.odometry[i - 1].measured_relative).renormalized();
            let rep = stage(
                "track",
                track_pose(
                    &map,
                    &observations[i].color,
                    &observations[i].depth,
                    &cameras[i].with_pose(init),
                    &cfg.render,
                    &cfg.tracking,
                ),
            )?;
            tracking.push(FrameStat {
                index: i,
                initial_loss: rep.initial_loss,
                final_loss: rep.losses.last().copied().unwrap_or(rep.initial_loss),
                iterations: rep.iterations,
                diverged: rep.diverged,
            });
            estimates.push(rep.pose);
        }
        if i % cfg.pipeline.keyframe_every == 0 {
            let cam = cameras[i].with_pose(estimates[i]);
            let vis = visible_set(&map, &cam, near);
            stage("covisibility", covis.insert_keyframe(i as u64, &vis))?;
            stage("covisibility", observe(&mut map, &cam, &vis))?;
            keyframes.push(Keyframe {
                camera: cam,
                color: observations[i].color.clone(),
                depth: observations[i].depth.clone(),
            });
            keyframe_ids.push(i);
            let start = keyframes.len().saturating_sub(cfg.pipeline.keyframe_window);
            let r0 = Instant::now();
            let (refined, rep) = stage("refine", refine_map(&map, &keyframes[start..], &cfg.render, &cfg.refine))?;
            refine_time += r0.elapsed().as_secs_f64();
            map = refined;
            refinement.push(RefineStat {
                keyframe: i,
                initial_loss: rep.initial_loss,
                final_loss: rep.losses.last().copied().unwrap_or(rep.initial_loss),
                accepted_steps: rep.accepted_steps,
            });
        }
    }
    art.tum("tracked.tum", &estimates, &traj.timestamps)?;
    timings.insert("track".to_string(), t0.elapsed().as_secs_f64() - refine_time);
    timings.insert("refine".to_string(), refine_time);

    // signatures + descriptors
    let t0 = Instant::now();
    let samples = stage("signatures", pose_samples(&estimates, &traj.timestamps, &cfg.spectral))?;
    let windows = stage("signatures", trajectory_signatures(&samples, &cfg.spectral))?;
    let signatures = assign_signatures(n, &windows, &cfg.spectral);
    let descriptors = stage(
        "descriptors",
        observations.iter().map(|o| extract_descriptor(&o.color)).collect::<easlam_core::Result<Vec<_>>>(),
    )?;
    timings.insert("features".to_string(), t0.elapsed().as_secs_f64());

    // pose graph
    let t0 = Instant::now();
    let base_info = odometry_information(cfg.synth.trajectory.sigma_t, cfg.synth.trajectory.sigma_r);
    let nodes: Vec<PoseNode<f64>> = (0..n)
        .map(|i| PoseNode {
            id: i as u64,
            pose: estimates[i],
            descriptor: Some(descriptors[i].clone()),
            signature: Some(signatures[i]),
            timestamp: traj.timestamps[i],
        })
        .collect();
    let mut edges: Vec<PoseEdge<f64>> = (0..n - 1)
        .map(|i| PoseEdge {
            from: i as u64,
            to: i as u64 + 1,
            measured_relative: estimates[i].between(&estimates[i + 1]),
            information: base_info,
            confidence: 1.0,
            kind: EdgeKind::Odometry,
        })
        .collect();
    edges.extend(traj.loops.iter().cloned());
    let outcome = stage(
        "pgo",
        run_sa_pgo(
            &nodes,
            &edges,
            &base_info,
            &cfg.solver,
            &cfg.spectral,
            WeightOverride::default(),
        ),
    )?;
    let optimized: Vec<Se3<f64>> = outcome.nodes.iter().map(|n| n.pose).collect();
    if let Some(p) = art.path("graph.g2o") {
        let mut buf = Vec::new();
        write_g2o(&outcome.nodes, &outcome.edges, &mut buf)?;
        fs::write(p, buf)?;
    }
    art.tum("optimized.tum", &optimized, &traj.timestamps)?;
    timings.insert("pgo".to_string(), t0.elapsed().as_secs_f64());

    // metrics
    let t0 = Instant::now();
    let ate_odometry = stage("metrics", compute_ate(&odometry_poses, &traj.truth))?;
    let ate_tracked = stage("metrics", compute_ate(&estimates, &traj.truth))?;
    let ate_optimized = stage("metrics", compute_ate(&optimized, &traj.truth))?;
    let mut mse_sum = 0.0;
    for (k, &i) in keyframe_ids.iter().enumerate() {
        let frame = stage("metrics", render(&map, &cameras[i].with_pose(optimized[i]), &cfg.render))?;
        mse_sum += stage("metrics", compute_psnr(&frame.color, &observations[i].color))?.mse;
        if k == 0 || k + 1 == keyframe_ids.len() {
            if let Some(p) = art.path(&format!("keyframe_{i:03}_map.ppm")) {
                save_ppm(&p, &frame.color)?;
            }
            if let Some(p) = art.path(&format!("keyframe_{i:03}_observed.ppm")) {
                save_ppm(&p, &observations[i].color)?;
            }
        }
    }
    let mse_mean = mse_sum / keyframe_ids.len().max(1) as f64;
    let map_psnr_db = if mse_mean == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse_mean).log10()
    };
    if let Some(p) = art.path("map.toml") {
        save_scene(&p, &map)?;
    }
    timings.insert("metrics".to_string(), t0.elapsed().as_secs_f64());

    let r = &outcome.report;
    let report = PipelineReport {
        seed: cfg.seed,
        frames: n,
        keyframes: keyframe_ids,
        ate_odometry,
        ate_tracked,
        ate_optimized,
        map_psnr_db,
        pgo: PgoSummary {
            fiedler: outcome.fiedler,
            lambda_spe: outcome.regularization.lambda_spe,
            lambda_smo: outcome.regularization.lambda_smo,
            tau_freq: outcome.regularization.tau_freq,
            spectral_edges: outcome.spectral_edges,
            skipped_pairs: outcome.skipped_pairs,
            iterations: r.iterations,
            accepted_steps: r.accepted_steps,
            initial_objective: r.initial_objective,
            final_objective: r.objectives.last().copied().unwrap_or(r.initial_objective),
            converged: r.converged,
            aborted: r.aborted,
        },
        tracking,
        refinement,
        config: cfg.clone(),
    };
    art.text("report.toml", &report.to_toml()?)?;
    let timing_text = toml::to_string(&timings).map_err(|e| HarnessError::Config(e.to_string()))?;
    art.text("timings.toml", &timing_text)?;
    Ok(PipelineOutput { report, timings })
}
