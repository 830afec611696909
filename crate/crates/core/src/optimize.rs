//! Joint photometric/depth loss, Gaussian map refinement and pose tracking.

use nalgebra::{DMatrix, DVector, Matrix6, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, Scene};
use crate::image::Image;
use crate::lie::{se3_exp, Se3, Twist};
use crate::projection::ProjectedGaussian;
use crate::render::{backward, filter_and_project, prepare, render, render_prepared, RenderConfig, RenderedFrame};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 1.0, depth: 0.1 }
    }
}

fn check_shapes<T: Real>(rendered: &RenderedFrame<T>, gt_color: &Image<T>, gt_depth: &Image<T>) -> Result<()> {
    if !rendered.color.same_shape(gt_color) || !rendered.depth.same_shape(gt_depth) {
        return Err(Error::invalid(format!(
            "resolution mismatch: rendered {}x{}, ground truth {}x{} / {}x{}",
            rendered.color.width, rendered.color.height, gt_color.width, gt_color.height, gt_depth.width, gt_depth.height
        )));
    }
    Ok(())
}

/// `λ_rgb · mean (C − C_gt)² + λ_depth · mean (D − D_gt)²`, the color mean
/// taken over every channel of every pixel and the depth mean over pixels
/// with nonzero ground-truth depth.
pub fn compute_loss<T: Real>(
    rendered: &RenderedFrame<T>,
    gt_color: &Image<T>,
    gt_depth: &Image<T>,
    lambda_rgb: T,
    lambda_depth: T,
) -> Result<T> {
    check_shapes(rendered, gt_color, gt_depth)?;
    let mut color = T::zero();
    for (a, b) in rendered.color.data.iter().zip(&gt_color.data) {
        color += (*a - *b) * (*a - *b);
    }
    color /= T::from_count(gt_color.data.len().max(1));
    let (mut depth, mut count) = (T::zero(), 0usize);
    for (a, b) in rendered.depth.data.iter().zip(&gt_depth.data) {
        if *b != T::zero() {
            depth += (*a - *b) * (*a - *b);
            count += 1;
        }
    }
    if count > 0 {
        depth /= T::from_count(count);
    }
    Ok(lambda_rgb * color + lambda_depth * depth)
}

/// Per-pixel `∂L/∂C` and `∂L/∂D` of [`compute_loss`].
fn loss_gradient<T: Real>(
    rendered: &RenderedFrame<T>,
    gt_color: &Image<T>,
    gt_depth: &Image<T>,
    weights: &LossWeights,
) -> (Image<T>, Image<T>) {
    let two = T::lit(2.0);
    let kc = two * T::lit(weights.rgb) / T::from_count(gt_color.data.len().max(1));
    let dc = rendered.color.data.iter().zip(&gt_color.data).map(|(a, b)| kc * (*a - *b)).collect();
    let count = gt_depth.data.iter().filter(|&&d| d != T::zero()).count();
    let kd = if count > 0 {
        two * T::lit(weights.depth) / T::from_count(count)
    } else {
        T::zero()
    };
    let dd = rendered
        .depth
        .data
        .iter()
        .zip(&gt_depth.data)
        .map(|(a, b)| if *b != T::zero() { kd * (*a - *b) } else { T::zero() })
        .collect();
    let (w, h) = (gt_color.width, gt_color.height);
    (
        Image::from_vec(w, h, 3, dc).expect("shape checked"),
        Image::from_vec(w, h, 1, dd).expect("shape checked"),
    )
}

/// A training view: camera plus ground-truth color and depth (0 = no depth).
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe<T: Real> {
    pub camera: Camera<T>,
    pub color: Image<T>,
    pub depth: Image<T>,
}

/// Largest per-iteration change of each parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepSizes {
    /// Meters.
    pub position: f64,
    /// Multiplicative, in log-scale units.
    pub log_scale: f64,
    /// Radians.
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes {
            position: 0.01,
            log_scale: 0.1,
            rotation: 0.1,
            opacity: 0.1,
            color: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub step_sizes: StepSizes,
    pub loss: LossWeights,
    pub max_backtracks: usize,
    /// Sufficient decrease constant of the backtracking line search.
    pub armijo: f64,
    /// Central-difference step used to differentiate the per-primitive
    /// filter + projection map.
    pub projection_fd_step: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 10,
            step_sizes: StepSizes::default(),
            loss: LossWeights::default(),
            max_backtracks: 30,
            armijo: 1e-4,
            projection_fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineReport {
    pub initial_loss: f64,
    /// Loss after each iteration.
    pub losses: Vec<f64>,
    pub accepted_steps: usize,
    /// Primitive updates dropped because their gradient was not finite.
    pub skipped_gradients: usize,
}

/// Per-primitive parameter gradient: center (3), log-scales (3), world-frame
/// rotation vector (3), opacity (1), color (3).
const PARAMS: usize = 13;
type ParamGrad<T> = [T; PARAMS];

fn perturbed<T: Real>(g: &Gaussian3D<T>, k: usize, h: T) -> Gaussian3D<T> {
    let mut p = g.clone();
    match k {
        0..=2 => p.center[k] += h,
        3..=5 => p.scales[k - 3] *= h.exp(),
        6..=8 => {
            let mut w = Vector3::zeros();
            w[k - 6] = h;
            p.orientation = UnitQuaternion::from_scaled_axis(w) * p.orientation;
        }
        9 => p.opacity += h,
        _ => unreachable!(),
    }
    p
}

fn projected_features<T: Real>(p: &ProjectedGaussian<T>) -> [T; 7] {
    [
        p.mean2d.x,
        p.mean2d.y,
        p.cov2d[(0, 0)],
        p.cov2d[(0, 1)],
        p.cov2d[(1, 1)],
        p.depth,
        p.opacity,
    ]
}

fn scene_loss_and_gradient<T: Real>(
    scene: &Scene<T>,
    keyframes: &[Keyframe<T>],
    render_cfg: &RenderConfig,
    cfg: &RefineConfig,
    want_gradient: bool,
) -> Result<(T, Vec<ParamGrad<T>>)> {
    let n_kf = T::from_count(keyframes.len());
    let mut loss = T::zero();
    let mut grads = vec![[T::zero(); PARAMS]; if want_gradient { scene.len() } else { 0 }];
    let h = T::lit(cfg.projection_fd_step);
    for kf in keyframes {
        let prep = prepare(scene, &kf.camera, render_cfg)?;
        let frame = render_prepared(&prep, render_cfg)?;
        loss += compute_loss(&frame, &kf.color, &kf.depth, T::lit(cfg.loss.rgb), T::lit(cfg.loss.depth))? / n_kf;
        if !want_gradient {
            continue;
        }
        let (dc, dd) = loss_gradient(&frame, &kf.color, &kf.depth, &cfg.loss);
        let pg = backward(&prep, render_cfg, &dc, &dd)?;
        for (p, g) in prep.projected.iter().zip(&pg) {
            let i = p.source_index;
            let src = &scene.gaussians[i];
            // dL/d(feature): mean (2), cov entries (00, 01, 11), depth, opacity.
            let df = [
                g.mean2d.x,
                g.mean2d.y,
                g.cov2d[(0, 0)],
                g.cov2d[(0, 1)] + g.cov2d[(1, 0)],
                g.cov2d[(1, 1)],
                g.depth,
                g.opacity,
            ];
            for k in 0..10 {
                let plus = filter_and_project(&perturbed(src, k, h), &kf.camera, i, render_cfg);
                let minus = filter_and_project(&perturbed(src, k, -h), &kf.camera, i, render_cfg);
                let (Some(plus), Some(minus)) = (plus, minus) else {
                    continue;
                };
                let (fp, fm) = (projected_features(&plus), projected_features(&minus));
                let mut acc = T::zero();
                for j in 0..7 {
                    acc += df[j] * (fp[j] - fm[j]) / (h + h);
                }
                grads[i][k] += acc / n_kf;
            }
            for c in 0..3 {
                grads[i][10 + c] += g.color[c] / n_kf;
            }
        }
    }
    Ok((loss, grads))
}

fn apply_step<T: Real>(scene: &Scene<T>, deltas: &[ParamGrad<T>]) -> Scene<T> {
    let mut out = scene.clone();
    for (g, d) in out.gaussians.iter_mut().zip(deltas) {
        for k in 0..3 {
            g.center[k] -= d[k];
            g.scales[k] *= (-d[3 + k]).exp();
            g.color[k] = (g.color[k] - d[10 + k]).max(T::zero()).min(T::one());
        }
        let w = Vector3::new(-d[6], -d[7], -d[8]);
        g.orientation = crate::gaussian::canonical_quaternion(UnitQuaternion::from_scaled_axis(w) * g.orientation);
        g.opacity = (g.opacity - d[9]).max(T::zero()).min(T::one());
    }
    out
}

/// Gradient descent on centers, scales, orientations, opacities and colors
/// with a backtracking line search, so the reported loss never increases.
pub fn refine_map<T: Real>(
    scene: &Scene<T>,
    keyframes: &[Keyframe<T>],
    render_cfg: &RenderConfig,
    cfg: &RefineConfig,
) -> Result<(Scene<T>, RefineReport)> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("refine_map needs at least one iteration"));
    }
    if keyframes.is_empty() {
        return Err(Error::invalid("refine_map needs at least one keyframe"));
    }
    let s = &cfg.step_sizes;
    let group = |k: usize| -> f64 {
        match k {
            0..=2 => s.position,
            3..=5 => s.log_scale,
            6..=8 => s.rotation,
            9 => s.opacity,
            _ => s.color,
        }
    };
    let mut current = scene.clone();
    let (mut loss, _) = scene_loss_and_gradient(&current, keyframes, render_cfg, cfg, false)?;
    let mut report = RefineReport {
        initial_loss: loss.as_f64(),
        ..RefineReport::default()
    };
    let mut t = T::one();
    for _ in 0..cfg.iterations {
        let (_, mut grads) = scene_loss_and_gradient(&current, keyframes, render_cfg, cfg, true)?;
        for g in grads.iter_mut() {
            if g.iter().any(|v| !v.is_finite()) {
                *g = [T::zero(); PARAMS];
                report.skipped_gradients += 1;
            }
        }
        // Scale so the largest change of any parameter equals its group step.
        let peak = grads
            .iter()
            .flat_map(|g| g.iter().map(|v| v.abs()))
            .fold(T::zero(), |a, b| a.max(b));
        if !(peak > T::zero()) {
            report.losses.push(loss.as_f64());
            continue;
        }
        let direction: Vec<ParamGrad<T>> = grads
            .iter()
            .map(|g| std::array::from_fn(|k| g[k] * T::lit(group(k)) / peak))
            .collect();
        let slope: T = grads
            .iter()
            .zip(&direction)
            .map(|(g, d)| g.iter().zip(d).fold(T::zero(), |a, (x, y)| a + *x * *y))
            .fold(T::zero(), |a, b| a + b);
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            let step: Vec<ParamGrad<T>> = direction.iter().map(|d| d.map(|v| v * t)).collect();
            let trial = apply_step(&current, &step);
            let (trial_loss, _) = scene_loss_and_gradient(&trial, keyframes, render_cfg, cfg, false)?;
            if trial_loss <= loss - T::lit(cfg.armijo) * t * slope {
                current = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            t *= T::lit(0.5);
        }
        if accepted {
            report.accepted_steps += 1;
            t = (t + t).min(T::one());
        } else {
            t = T::one();
        }
        report.losses.push(loss.as_f64());
    }
    Ok((current, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub iterations: usize,
    pub loss: LossWeights,
    /// Central-difference step on each twist coordinate.
    pub fd_step: f64,
    pub initial_damping: f64,
    /// Consecutive rejected steps before the run is declared divergent.
    pub divergence_window: usize,
    pub min_step: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            iterations: 20,
            loss: LossWeights::default(),
            fd_step: 1e-5,
            initial_damping: 1e-4,
            divergence_window: 10,
            min_step: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackReport<T: Real> {
    /// Camera-to-world pose with the lowest loss seen.
    pub pose: Se3<T>,
    pub initial_loss: f64,
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub diverged: bool,
    /// Set when no step was ever accepted, typically because the loss does
    /// not depend on the pose.
    pub no_progress: bool,
}

struct Residuals<'a, T: Real> {
    scene: &'a Scene<T>,
    camera: Camera<T>,
    gt_color: &'a Image<T>,
    gt_depth: &'a Image<T>,
    render_cfg: &'a RenderConfig,
    w_color: T,
    w_depth: T,
}

impl<T: Real> Residuals<'_, T> {
    /// Stacked residual whose squared norm equals [`compute_loss`].
    fn eval(&self, pose: &Se3<T>) -> Result<DVector<T>> {
        let frame = render(self.scene, &self.camera.with_pose(*pose), self.render_cfg)?;
        check_shapes(&frame, self.gt_color, self.gt_depth)?;
        let mut r: Vec<T> = frame
            .color
            .data
            .iter()
            .zip(&self.gt_color.data)
            .map(|(a, b)| self.w_color * (*a - *b))
            .collect();
        r.extend(
            frame
                .depth
                .data
                .iter()
                .zip(&self.gt_depth.data)
                .map(|(a, b)| if *b != T::zero() { self.w_depth * (*a - *b) } else { T::zero() }),
        );
        Ok(DVector::from_vec(r))
    }
}

/// Damped Gauss–Newton on the left perturbation `exp(ξ)·T` of the
/// camera-to-world pose, with a central-difference Jacobian.
pub fn track_pose<T: Real>(
    scene: &Scene<T>,
    gt_color: &Image<T>,
    gt_depth: &Image<T>,
    camera_init: &Camera<T>,
    render_cfg: &RenderConfig,
    cfg: &TrackConfig,
) -> Result<TrackReport<T>> {
    let n_color = gt_color.data.len().max(1);
    let n_depth = gt_depth.data.iter().filter(|&&d| d != T::zero()).count();
    let res = Residuals {
        scene,
        camera: *camera_init,
        gt_color,
        gt_depth,
        render_cfg,
        w_color: (T::lit(cfg.loss.rgb) / T::from_count(n_color)).sqrt(),
        w_depth: if n_depth > 0 {
            (T::lit(cfg.loss.depth) / T::from_count(n_depth)).sqrt()
        } else {
            T::zero()
        },
    };
    let mut pose = camera_init.pose;
    let mut r = res.eval(&pose)?;
    let mut loss = r.norm_squared();
    let mut report = TrackReport {
        pose,
        initial_loss: loss.as_f64(),
        losses: Vec::new(),
        iterations: 0,
        diverged: false,
        no_progress: true,
    };
    let h = T::lit(cfg.fd_step);
    let mut damping = T::lit(cfg.initial_damping);
    let mut rejected = 0usize;
    for it in 0..cfg.iterations {
        report.iterations = it + 1;
        let mut jac = DMatrix::zeros(r.len(), 6);
        for k in 0..6 {
            let mut xi = Vector6::zeros();
            xi[k] = h;
            let plus = res.eval(&(se3_exp(&Twist(xi))? * pose))?;
            let minus = res.eval(&(se3_exp(&Twist(-xi))? * pose))?;
            jac.set_column(k, &((plus - minus) / (h + h)));
        }
        let hess: Matrix6<T> = (jac.transpose() * &jac).fixed_view::<6, 6>(0, 0).into();
        let grad: Vector6<T> = (jac.transpose() * &r).fixed_rows::<6>(0).into();
        let scale = hess.diagonal().max();
        if !(scale > T::zero()) || grad.amax() <= T::default_epsilon() * T::default_epsilon() {
            report.losses.push(loss.as_f64());
            break;
        }
        let step_taken;
        loop {
            let damped = hess + Matrix6::identity() * (damping * scale);
            let Some(chol) = damped.cholesky() else {
                damping *= T::lit(10.0);
                continue;
            };
            let delta = -chol.solve(&grad);
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical("non-finite tracking step".into()));
            }
            let candidate = (se3_exp(&Twist(delta))? * pose).renormalized();
            let r_new = res.eval(&candidate)?;
            let new_loss = r_new.norm_squared();
            if new_loss < loss {
                pose = candidate;
                r = r_new;
                loss = new_loss;
                damping = (damping / T::lit(3.0)).max(T::lit(1e-12));
                rejected = 0;
                report.no_progress = false;
                step_taken = delta.norm() >= T::lit(cfg.min_step);
            } else {
                damping *= T::lit(4.0);
                rejected += 1;
                step_taken = delta.norm() >= T::lit(cfg.min_step);
            }
            break;
        }
        report.losses.push(loss.as_f64());
        if rejected >= cfg.divergence_window {
            report.diverged = true;
            break;
        }
        if !step_taken {
            break;
        }
    }
    report.pose = pose;
    Ok(report)
}
