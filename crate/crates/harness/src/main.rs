use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use easlam_core::format::{cameras_to_string, load_camera, load_scene, save_camera, save_scene};
use easlam_core::image::{save_depth, save_ppm};
use easlam_core::pgo::{read_g2o, write_g2o, EdgeKind, PoseGraph, SolverConfig};
use easlam_core::render::{render, AlphaMode};
use easlam_core::trajectory::{read_tum, write_tum};
use easlam_core::PoseNode;
use easlam_harness::bench::{
    multiresolution_benchmark, quad_table_tsv, quadrature_error_table, random_quad_cases, BenchConfig, PgoMetrics,
    DEFAULT_SCALES,
};
use easlam_harness::graph::{run_sa_pgo, WeightOverride};
use easlam_harness::metrics::compute_ate;
use easlam_harness::pipeline::{run_pipeline, PipelineConfig};
use easlam_harness::synth::{generate_synthetic_scene, generate_trajectory, odometry_information, SynthSpec};
use easlam_harness::HarnessError;
use nalgebra::Matrix6;

#[derive(Parser)]
#[command(name = "easlam", version, about = "Anti-aliased Gaussian splatting and spectral pose graph toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene, trajectory and supersampled ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene from a camera.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value = "eaa")]
        mode: AlphaMode,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Quadrature sample seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output prefix; writes `<prefix>.ppm` and `<prefix>.depth`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Quadrature error against the dense reference integral.
    QuadBench {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32.0)]
        kappa_max: f64,
        #[arg(long, default_value_t = 256)]
        grid: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a g2o pose graph.
    Pgo {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda_spe: Option<f64>,
        #[arg(long)]
        lambda_smo: Option<f64>,
        #[arg(long)]
        tau_opt: Option<f64>,
        #[arg(long)]
        tau_freq: Option<f64>,
    },
    /// ATE RMSE between two TUM trajectories of equal length.
    EvalAte {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Multiresolution benchmark on the synthetic scene.
    BenchMultires {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// End-to-end run from a config file.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Option<PipelineConfig>, HarnessError> {
    path.map(|p| PipelineConfig::from_toml(&fs::read_to_string(p)?)).transpose()
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(config: Option<&Path>, seed: u64, out: &Path) -> Result<(), HarnessError> {
    let spec = load_config(config)?.map(|c| c.synth).unwrap_or_default();
    fs::create_dir_all(out)?;
    let s = generate_synthetic_scene(&spec, seed)?;
    let traj = generate_trajectory(&spec.trajectory, seed.wrapping_add(1))?;
    save_scene(&out.join("scene.toml"), &s.scene)?;
    fs::write(out.join("cameras.toml"), cameras_to_string(&s.cameras)?)?;
    for (i, (cam, (color, depth))) in s.cameras.iter().zip(&s.ground_truth).enumerate() {
        save_camera(&out.join(format!("camera_{i:02}.toml")), cam)?;
        save_ppm(&out.join(format!("gt_{i:02}.ppm")), color)?;
        save_depth(&out.join(format!("gt_{i:02}.depth")), depth)?;
    }
    let stamped: Vec<_> = traj.timestamps.iter().copied().zip(traj.truth.iter().copied()).collect();
    let mut buf = Vec::new();
    write_tum(&stamped, &mut buf)?;
    fs::write(out.join("truth.tum"), buf)?;
    let nodes: Vec<PoseNode> = traj
        .integrate_odometry()
        .into_iter()
        .enumerate()
        .map(|(i, p)| PoseNode::new(i as u64, p, traj.timestamps[i]))
        .collect();
    let mut buf = Vec::new();
    write_g2o(&nodes, &traj.edges(), &mut buf)?;
    fs::write(out.join("graph.g2o"), buf)?;
    println!(
        "{} gaussians, {} views, {} poses -> {}",
        s.scene.len(),
        s.cameras.len(),
        traj.truth.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render_cmd(
    scene: &Path,
    camera: &Path,
    mode: AlphaMode,
    scale: f64,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), HarnessError> {
    let scene = load_scene::<f64>(scene)?;
    let cam = load_camera::<f64>(camera)?.scaled(scale)?;
    let mut cfg = load_config(config)?.map(|c| c.render).unwrap_or_default().with_mode(mode);
    cfg.quadrature.deterministic_seed = seed;
    let frame = render(&scene, &cam, &cfg)?;
    let prefix = out.to_string_lossy();
    save_ppm(Path::new(&format!("{prefix}.ppm")), &frame.color)?;
    save_depth(Path::new(&format!("{prefix}.depth")), &frame.depth)?;
    println!("{}x{} {} render -> {prefix}.ppm", cam.width, cam.height, mode);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pgo_cmd(
    input: &Path,
    output: &Path,
    report: Option<&Path>,
    config: Option<&Path>,
    weights: WeightOverride,
    tau_opt: Option<f64>,
    tau_freq: Option<f64>,
) -> Result<(), HarnessError> {
    let cfg = load_config(config)?.unwrap_or_default();
    let mut solver: SolverConfig = cfg.solver.clone();
    if let Some(v) = tau_opt {
        solver.tau_opt = v;
    }
    if let Some(v) = tau_freq {
        solver.tau_freq = v;
    }
    let (nodes, edges): PoseGraph<f64> = read_g2o(BufReader::new(fs::File::open(input)?))?;
    let base = edges
        .iter()
        .find(|e| e.kind == EdgeKind::Odometry)
        .map(|e| e.information)
        .unwrap_or_else(Matrix6::identity);
    let outcome = run_sa_pgo(&nodes, &edges, &base, &solver, &cfg.spectral, weights)?;
    let mut buf = Vec::new();
    write_g2o(&outcome.nodes, &outcome.edges, &mut buf)?;
    fs::write(output, buf)?;
    let r = &outcome.report;
    let text = format!(
        "nodes = {}\nedges = {}\nspectral_edges = {}\nfiedler = {:e}\nlambda_spe = {:e}\nlambda_smo = {:e}\ninitial_objective = {:e}\nfinal_objective = {:e}\niterations = {}\naccepted_steps = {}\nfinal_damping = {:e}\nconverged = {}\naborted = {}\n",
        outcome.nodes.len(),
        outcome.edges.len(),
        outcome.spectral_edges,
        outcome.fiedler,
        outcome.regularization.lambda_spe,
        outcome.regularization.lambda_smo,
        r.initial_objective,
        r.objectives.last().copied().unwrap_or(r.initial_objective),
        r.iterations,
        r.accepted_steps,
        r.final_damping,
        r.converged,
        r.aborted
    );
    write_out(report, &text)?;
    if report.is_some() {
        println!(
            "objective {:.6e} -> {:.6e} in {} iterations",
            r.initial_objective,
            r.objectives.last().copied().unwrap_or(r.initial_objective),
            r.iterations
        );
    }
    Ok(())
}

fn eval_ate(estimate: &Path, truth: &Path) -> Result<(), HarnessError> {
    let e = read_tum::<f64, _>(BufReader::new(fs::File::open(estimate)?))?;
    let t = read_tum::<f64, _>(BufReader::new(fs::File::open(truth)?))?;
    let ep: Vec<_> = e.into_iter().map(|x| x.1).collect();
    let tp: Vec<_> = t.into_iter().map(|x| x.1).collect();
    println!("{:.9}", compute_ate(&ep, &tp)?);
    Ok(())
}

fn bench_multires(
    config: Option<&Path>,
    seed: u64,
    scales: Option<Vec<f64>>,
    out: Option<&Path>,
) -> Result<(), HarnessError> {
    let loaded = load_config(config)?;
    let spec: SynthSpec = loaded.as_ref().map(|c| c.synth.clone()).unwrap_or_default();
    let mut bench = BenchConfig {
        scales: scales.unwrap_or_else(|| DEFAULT_SCALES.to_vec()),
        supersample: spec.supersample,
        ..BenchConfig::default()
    };
    if let Some(c) = &loaded {
        bench.render = c.render.clone();
    }
    let world = generate_synthetic_scene(&SynthSpec { views: spec.views, ..spec.clone() }, seed)?;
    let mut report = multiresolution_benchmark(&world.scene, &world.cameras, &bench)?;

    let t0 = std::time::Instant::now();
    let traj = generate_trajectory(&spec.trajectory, seed.wrapping_add(1))?;
    let initial = traj.integrate_odometry();
    let nodes: Vec<PoseNode> = initial
        .iter()
        .enumerate()
        .map(|(i, p)| PoseNode::new(i as u64, *p, traj.timestamps[i]))
        .collect();
    let (solver, spectral) = loaded
        .map(|c| (c.solver, c.spectral))
        .unwrap_or_default();
    let info = odometry_information(spec.trajectory.sigma_t, spec.trajectory.sigma_r);
    let outcome = run_sa_pgo(&nodes, &traj.edges(), &info, &solver, &spectral, WeightOverride::default())?;
    let after: Vec<_> = outcome.nodes.iter().map(|n| n.pose).collect();
    report.pgo = Some(PgoMetrics {
        ate_before: compute_ate(&initial, &traj.truth)?,
        ate_after: compute_ate(&after, &traj.truth)?,
        iterations: outcome.report.iterations,
        accepted_steps: outcome.report.accepted_steps,
        fiedler: outcome.fiedler,
        spectral_edges: outcome.spectral_edges,
    });
    report.runtimes.insert("pgo".into(), t0.elapsed().as_secs_f64());
    if let Some(p) = out {
        fs::write(p, report.to_toml()?)?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn pipeline(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), HarnessError> {
    let mut cfg = load_config(config)?.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let output = run_pipeline(&cfg, Some(out))?;
    print!("{}", output.report.summary());
    for (stage, secs) in &output.timings {
        println!("{:<22}{:>11.3}s", format!("time_{stage}"), secs);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synth { config, seed, out } => synth(config.as_deref(), seed, &out),
        Command::Render {
            scene,
            camera,
            mode,
            scale,
            seed,
            config,
            out,
        } => render_cmd(&scene, &camera, mode, scale, seed, config.as_deref(), &out),
        Command::QuadBench {
            cases,
            seed,
            kappa_max,
            grid,
            ks,
            out,
        } => {
            if !(kappa_max >= 1.0) || cases == 0 {
                return Err(HarnessError::Config("need at least one case and kappa_max >= 1".into()));
            }
            let cs = random_quad_cases(cases, seed, kappa_max);
            let cfg = easlam_core::quadrature::QuadratureConfig {
                deterministic_seed: seed,
                ..Default::default()
            };
            let rows = quadrature_error_table(&cs, &ks, grid, &cfg)?;
            write_out(out.as_deref(), &quad_table_tsv(&rows))
        }
        Command::Pgo {
            input,
            output,
            report,
            config,
            lambda_spe,
            lambda_smo,
            tau_opt,
            tau_freq,
        } => pgo_cmd(
            &input,
            &output,
            report.as_deref(),
            config.as_deref(),
            WeightOverride { lambda_spe, lambda_smo },
            tau_opt,
            tau_freq,
        ),
        Command::EvalAte { estimate, truth } => eval_ate(&estimate, &truth),
        Command::BenchMultires {
            config,
            seed,
            scales,
            out,
        } => bench_multires(config.as_deref(), seed, scales, out.as_deref()),
        Command::Pipeline { config, seed, out } => pipeline(config.as_deref(), seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
