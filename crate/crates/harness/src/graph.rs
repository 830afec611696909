//! Spectral-aware pose graph optimization end to end: spectrum, adaptive
//! weights, candidate edges and the solver.

use easlam_core::pgo::{
    adapt_regularization, build_adjacency, laplacian_spectrum, normalized_laplacian, optimize, select_candidate_edges,
    spectral_cluster, OptimizeReport, PoseEdge, PoseNode, Regularization, SolverConfig,
};
use easlam_core::trajectory::SpectralConfig;
use easlam_core::Result;
use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightOverride {
    pub lambda_spe: Option<f64>,
    pub lambda_smo: Option<f64>,
}

pub struct PgoOutcome {
    pub nodes: Vec<PoseNode<f64>>,
    /// Input edges followed by any spectral candidates.
    pub edges: Vec<PoseEdge<f64>>,
    pub report: OptimizeReport,
    pub fiedler: f64,
    pub regularization: Regularization,
    pub spectral_edges: usize,
    pub skipped_pairs: usize,
}

pub fn run_sa_pgo(
    nodes: &[PoseNode<f64>],
    edges: &[PoseEdge<f64>],
    base_information: &Matrix6<f64>,
    solver: &SolverConfig,
    spectral: &SpectralConfig,
    weights: WeightOverride,
) -> Result<PgoOutcome> {
    let (a, d) = build_adjacency(nodes, edges)?;
    let spectrum = laplacian_spectrum(&normalized_laplacian(&a, &d))?;
    let fiedler = spectrum.fiedler;
    let mut regularization = adapt_regularization(fiedler, solver);
    if let Some(v) = weights.lambda_spe {
        regularization.lambda_spe = v;
    }
    if let Some(v) = weights.lambda_smo {
        regularization.lambda_smo = v;
    }

    let mut all_edges = edges.to_vec();
    let mut spectral_edges = 0;
    let mut skipped_pairs = 0;
    let has_features = nodes.iter().any(|n| n.descriptor.is_some() && n.signature.is_some());
    if has_features && nodes.len() > solver.clusters {
        let labels = spectral_cluster(&spectrum.eigenvectors, solver.clusters)?;
        let sel = select_candidate_edges(
            nodes,
            &labels,
            regularization.tau_freq,
            base_information,
            solver,
            spectral,
        )?;
        spectral_edges = sel.edges.len();
        skipped_pairs = sel.skipped_pairs;
        all_edges.extend(sel.edges);
    }
    let (optimized, report) = optimize(
        nodes,
        &all_edges,
        regularization.lambda_spe,
        regularization.lambda_smo,
        solver,
    )?;
    Ok(PgoOutcome {
        nodes: optimized,
        edges: all_edges,
        report,
        fiedler,
        regularization,
        spectral_edges,
        skipped_pairs,
    })
}
