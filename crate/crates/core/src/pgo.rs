//! Spectral-aware pose graph optimization.
//!
//! Edge confidences define a weighted graph whose normalized Laplacian
//! spectrum drives candidate loop edges (spectral clustering) and the
//! strength of two regularizers added to the usual pose graph objective:
//!
//! ```text
//! E = Σ_{odometry, loop} ‖log(T_ij⁻¹ Tᵢ⁻¹ Tⱼ)‖²_{𝒮Ω}
//!   + λ_spe Σ_{spectral} 𝒮_ij ‖log(T_ij⁻¹ Tᵢ⁻¹ Tⱼ)‖²
//!   + λ_smo Σᵢ ‖ξᵢ₊₁ − ξᵢ‖²,   ξᵢ = log(Tᵢ⁻¹ Tᵢ₊₁)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix6, SymmetricEigen, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{descriptor_similarity, Descriptor};
use crate::error::{Error, Result};
use crate::lie::{se3_exp, se3_log, Se3, Twist};
use crate::scalar::Real;
use crate::trajectory::{frequency_coherence, geometric_regularity, spectral_confidence, SpectralConfig, SpectralSignature};

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNode<T: Real> {
    pub id: u64,
    pub pose: Se3<T>,
    pub descriptor: Option<Descriptor>,
    pub signature: Option<SpectralSignature<T>>,
    pub timestamp: f64,
}

impl<T: Real> PoseNode<T> {
    pub fn new(id: u64, pose: Se3<T>, timestamp: f64) -> Self {
        PoseNode {
            id,
            pose,
            descriptor: None,
            signature: None,
            timestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Loop,
    Spectral,
}

impl std::fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeKind::Odometry => "odometry",
            EdgeKind::Loop => "loop",
            EdgeKind::Spectral => "spectral",
        })
    }
}

impl std::str::FromStr for EdgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odometry" => Ok(EdgeKind::Odometry),
            "loop" => Ok(EdgeKind::Loop),
            "spectral" => Ok(EdgeKind::Spectral),
            other => Err(Error::invalid(format!("unknown edge kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEdge<T: Real> {
    pub from: u64,
    pub to: u64,
    pub measured_relative: Se3<T>,
    /// Ordered like twists: translation then rotation.
    pub information: Matrix6<T>,
    pub confidence: T,
    pub kind: EdgeKind,
}

impl<T: Real> PoseEdge<T> {
    pub fn validate(&self) -> Result<()> {
        if self.from == self.to {
            return Err(Error::invalid(format!("self-loop edge on node {}", self.from)));
        }
        if !(self.confidence >= T::zero() && self.confidence <= T::one()) {
            return Err(Error::invalid("edge confidence must lie in [0, 1]"));
        }
        let tol = T::lit(1e-10);
        let asym = (self.information - self.information.transpose()).amax();
        if !(asym <= tol * (T::one() + self.information.amax())) {
            return Err(Error::invalid("information matrix is not symmetric"));
        }
        let min_eig = SymmetricEigen::new(self.information).eigenvalues.min();
        if !(min_eig >= -tol * (T::one() + self.information.amax())) {
            return Err(Error::invalid("information matrix is not positive semidefinite"));
        }
        self.measured_relative.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tau_opt: f64,
    pub tau_freq: f64,
    pub lambda_spe_base: f64,
    pub lambda_smo_base: f64,
    pub clusters: usize,
    pub candidates_per_cluster: usize,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tau_opt: 0.05,
            tau_freq: 0.7,
            lambda_spe_base: 0.1,
            lambda_smo_base: 0.1,
            clusters: 4,
            candidates_per_cluster: 10,
            max_iterations: 100,
            step_tolerance: 1e-8,
            initial_damping: 1e-4,
            max_damping: 1e8,
            fd_step: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.tau_opt,
            self.tau_freq,
            self.step_tolerance,
            self.initial_damping,
            self.max_damping,
            self.fd_step,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("solver thresholds must be positive and finite"));
        }
        if !(self.lambda_spe_base >= 0.0 && self.lambda_smo_base >= 0.0) {
            return Err(Error::config("regularization weights must be non-negative"));
        }
        if self.clusters == 0 {
            return Err(Error::config("cluster count must be at least 1"));
        }
        Ok(())
    }
}

fn index_map<T: Real>(nodes: &[PoseNode<T>]) -> Result<BTreeMap<u64, usize>> {
    let mut map = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if map.insert(n.id, i).is_some() {
            return Err(Error::invalid(format!("duplicate node id {}", n.id)));
        }
    }
    Ok(map)
}

fn endpoints(map: &BTreeMap<u64, usize>, e: &PoseEdge<impl Real>) -> Result<(usize, usize)> {
    let get = |id: u64| {
        map.get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("edge references unknown node {id}")))
    };
    Ok((get(e.from)?, get(e.to)?))
}

/// Confidence-weighted adjacency `A` and degree matrix `D`. Parallel edges
/// keep the largest confidence.
pub fn build_adjacency<T: Real>(nodes: &[PoseNode<T>], edges: &[PoseEdge<T>]) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let map = index_map(nodes)?;
    let n = nodes.len();
    let mut a = DMatrix::<T>::zeros(n, n);
    for e in edges {
        let (i, j) = endpoints(&map, e)?;
        if i == j {
            continue;
        }
        let w = a[(i, j)].max(e.confidence);
        a[(i, j)] = w;
        a[(j, i)] = w;
    }
    let d = DMatrix::from_diagonal(&DVector::from_iterator(n, a.row_iter().map(|r| r.sum())));
    Ok((a, d))
}

/// `D^{-1/2}(D − A)D^{-1/2}`; isolated nodes get all-zero rows and columns.
pub fn normalized_laplacian<T: Real>(a: &DMatrix<T>, d: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    let inv_sqrt: Vec<T> = (0..n)
        .map(|i| {
            let di = d[(i, i)];
            if di > T::zero() {
                T::one() / di.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        if inv_sqrt[i] == T::zero() || inv_sqrt[j] == T::zero() {
            T::zero()
        } else if i == j {
            T::one() - a[(i, i)] * inv_sqrt[i] * inv_sqrt[i]
        } else {
            -a[(i, j)] * inv_sqrt[i] * inv_sqrt[j]
        }
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenvalues are
/// ascending; each eigenvector's largest-magnitude entry is positive.
pub fn jacobi_eigen<T: Real>(m: &DMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::invalid("matrix must be square"));
    }
    let scale = m.amax();
    if (m - m.transpose()).amax() > T::lit(1e-12) * (T::one() + scale) {
        return Err(Error::invalid("matrix must be symmetric"));
    }
    let mut a = m.clone();
    let mut v = DMatrix::identity(n, n);
    let frob = m.norm();
    let tol = T::default_epsilon() * (frob + T::default_epsilon());
    for _ in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut c = v.column(i).clone_owned();
        let lead = c.iter().copied().fold(T::zero(), |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < T::zero() {
            c.neg_mut();
        }
        vectors.set_column(col, &c);
    }
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianSpectrum<T: Real> {
    pub eigenvalues: DVector<T>,
    pub eigenvectors: DMatrix<T>,
    /// Second-smallest eigenvalue λ₂ᴸ (0 for a single node).
    pub fiedler: T,
}

pub fn laplacian_spectrum<T: Real>(l: &DMatrix<T>) -> Result<LaplacianSpectrum<T>> {
    let (mut values, vectors) = jacobi_eigen(l)?;
    let slack = T::lit(1e-9);
    let two = T::lit(2.0);
    for v in values.iter_mut() {
        if *v < T::zero() && *v >= -slack {
            *v = T::zero();
        } else if *v > two && *v <= two + slack {
            *v = two;
        }
    }
    let fiedler = if values.len() > 1 { values[1] } else { T::zero() };
    Ok(LaplacianSpectrum {
        eigenvalues: values,
        eigenvectors: vectors,
        fiedler,
    })
}

/// k-means on the row-normalized spectral embedding formed by the `k`
/// eigenvectors of smallest eigenvalue. Seeding starts at node 0 and adds
/// the farthest remaining point each time, lowest index on ties.
pub fn spectral_cluster<T: Real>(eigenvectors: &DMatrix<T>, k: usize) -> Result<Vec<usize>> {
    let n = eigenvectors.nrows();
    if k == 0 || k + 1 > eigenvectors.ncols() {
        return Err(Error::invalid(format!("cluster count {k} needs k + 1 ≤ {} eigenvectors", eigenvectors.ncols())));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let rows: Vec<Vec<T>> = (0..n)
        .map(|i| {
            let r: Vec<T> = (0..k).map(|c| eigenvectors[(i, c)]).collect();
            let norm = r.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            if norm > T::zero() {
                r.into_iter().map(|x| x / norm).collect()
            } else {
                r
            }
        })
        .collect();
    let dist2 = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + (*x - *y) * (*x - *y));

    let mut centers: Vec<Vec<T>> = vec![rows[0].clone()];
    while centers.len() < k.min(n) {
        let mut best = (0usize, -T::one());
        for (i, r) in rows.iter().enumerate() {
            let d = centers.iter().map(|c| dist2(r, c)).fold(T::max_value().unwrap_or(T::one()), |a, b| a.min(b));
            if d > best.1 {
                best = (i, d);
            }
        }
        centers.push(rows[best.0].clone());
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut best = (0usize, T::max_value().unwrap_or(T::one()));
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(r, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<T>> = rows.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            let count = T::from_count(members.len());
            for (d, slot) in center.iter_mut().enumerate() {
                *slot = members.iter().fold(T::zero(), |a, m| a + m[d]) / count;
            }
        }
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularization {
    pub lambda_spe: f64,
    pub lambda_smo: f64,
    pub tau_freq: f64,
}

/// Scales both regularizers by `clamp(λ₂ᴸ/τ_opt, 0.1, 2)` and raises the
/// coherence threshold by 0.1 on weakly connected graphs.
pub fn adapt_regularization(fiedler: f64, cfg: &SolverConfig) -> Regularization {
    let scale = (fiedler / cfg.tau_opt).clamp(0.1, 2.0);
    Regularization {
        lambda_spe: cfg.lambda_spe_base * scale,
        lambda_smo: cfg.lambda_smo_base * scale,
        tau_freq: if fiedler < cfg.tau_opt { cfg.tau_freq + 0.1 } else { cfg.tau_freq },
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSelection<T: Real> {
    pub edges: Vec<PoseEdge<T>>,
    /// Same-cluster, non-adjacent pairs skipped for lack of a descriptor or
    /// signature.
    pub skipped_pairs: usize,
}

/// Spectral loop candidates between non-adjacent nodes of the same cluster
/// whose signatures are coherent, best `M` per cluster by descriptor
/// similarity.
pub fn select_candidate_edges<T: Real>(
    nodes: &[PoseNode<T>],
    labels: &[usize],
    tau_freq: f64,
    base_information: &Matrix6<T>,
    cfg: &SolverConfig,
    spectral: &SpectralConfig,
) -> Result<CandidateSelection<T>> {
    if labels.len() != nodes.len() {
        return Err(Error::invalid("one label per node is required"));
    }
    spectral.validate()?;
    let mut per_cluster: BTreeMap<usize, Vec<(f64, usize, usize, T)>> = BTreeMap::new();
    let mut skipped = 0;
    for i in 0..nodes.len() {
        for j in i + 2..nodes.len() {
            if labels[i] != labels[j] {
                continue;
            }
            let (a, b) = (&nodes[i], &nodes[j]);
            let (Some(da), Some(db), Some(sa), Some(sb)) = (&a.descriptor, &b.descriptor, &a.signature, &b.signature)
            else {
                skipped += 1;
                continue;
            };
            let coh = frequency_coherence(sa, sb, spectral);
            if coh < T::lit(tau_freq) {
                continue;
            }
            per_cluster
                .entry(labels[i])
                .or_default()
                .push((descriptor_similarity(da, db), i, j, coh));
        }
    }
    let mut edges = Vec::new();
    for (_, mut cands) in per_cluster {
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        for (_, i, j, coh) in cands.into_iter().take(cfg.candidates_per_cluster) {
            let rel = nodes[i].pose.between(&nodes[j].pose);
            let conf = spectral_confidence(coh, geometric_regularity(&rel, spectral), spectral)?;
            let conf = conf.max(T::zero()).min(T::one());
            edges.push(PoseEdge {
                from: nodes[i].id,
                to: nodes[j].id,
                measured_relative: rel,
                information: base_information * conf,
                confidence: conf,
                kind: EdgeKind::Spectral,
            });
        }
    }
    Ok(CandidateSelection {
        edges,
        skipped_pairs: skipped,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizeReport {
    pub initial_objective: f64,
    /// Objective after each iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub final_damping: f64,
    pub converged: bool,
    /// Damping exceeded its ceiling; poses are the best found so far.
    pub aborted: bool,
}

enum Block<T: Real> {
    Relative {
        a: usize,
        b: usize,
        meas_inv: Se3<T>,
        sqrt_w: Matrix6<T>,
    },
    Smooth {
        i: usize,
        weight: T,
    },
}

impl<T: Real> Block<T> {
    fn nodes(&self) -> Vec<usize> {
        match self {
            Block::Relative { a, b, .. } => vec![*a, *b],
            Block::Smooth { i, .. } => vec![*i, i + 1, i + 2],
        }
    }

    fn residual(&self, poses: &[Se3<T>], over: Option<(usize, &Se3<T>)>) -> Vector6<T> {
        let pose = |k: usize| match over {
            Some((j, p)) if j == k => *p,
            _ => poses[k],
        };
        match self {
            Block::Relative { a, b, meas_inv, sqrt_w } => {
                let e = se3_log(&(meas_inv * &pose(*a).between(&pose(*b))));
                sqrt_w * e.0
            }
            Block::Smooth { i, weight } => {
                let x0 = se3_log(&pose(*i).between(&pose(i + 1))).0;
                let x1 = se3_log(&pose(i + 1).between(&pose(i + 2))).0;
                (x1 - x0) * *weight
            }
        }
    }
}

/// Symmetric square root `L` with `LᵀL = M` for PSD `M`.
fn psd_sqrt<T: Real>(m: &Matrix6<T>) -> Matrix6<T> {
    let eig = SymmetricEigen::new(*m);
    let s = eig.eigenvalues.map(|l| l.max(T::zero()).sqrt());
    eig.eigenvectors * Matrix6::from_diagonal(&s) * eig.eigenvectors.transpose()
}

fn build_blocks<T: Real>(
    nodes: &[PoseNode<T>],
    edges: &[PoseEdge<T>],
    lambda_spe: T,
    lambda_smo: T,
) -> Result<Vec<Block<T>>> {
    let map = index_map(nodes)?;
    let mut blocks = Vec::new();
    for e in edges {
        e.validate()?;
        let (a, b) = endpoints(&map, e)?;
        let sqrt_w = match e.kind {
            EdgeKind::Spectral => Matrix6::identity() * (lambda_spe * e.confidence).sqrt(),
            _ => psd_sqrt(&(e.information * e.confidence)),
        };
        blocks.push(Block::Relative {
            a,
            b,
            meas_inv: e.measured_relative.inverse(),
            sqrt_w,
        });
    }
    if lambda_smo > T::zero() {
        let w = lambda_smo.sqrt();
        for i in 0..nodes.len().saturating_sub(2) {
            blocks.push(Block::Smooth { i, weight: w });
        }
    }
    Ok(blocks)
}

fn check_odometry_connected<T: Real>(nodes: &[PoseNode<T>], edges: &[PoseEdge<T>]) -> Result<()> {
    let map = index_map(nodes)?;
    let n = nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges.iter().filter(|e| e.kind == EdgeKind::Odometry) {
        let (a, b) = endpoints(&map, e)?;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let roots: BTreeSet<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    if roots.len() > 1 {
        return Err(Error::invalid(format!(
            "odometry edges leave {} disconnected components",
            roots.len()
        )));
    }
    Ok(())
}

fn objective<T: Real>(blocks: &[Block<T>], poses: &[Se3<T>]) -> T {
    blocks.iter().fold(T::zero(), |acc, b| acc + b.residual(poses, None).norm_squared())
}

/// Evaluates the full objective for the given poses.
pub fn pose_graph_objective<T: Real>(
    nodes: &[PoseNode<T>],
    edges: &[PoseEdge<T>],
    lambda_spe: T,
    lambda_smo: T,
) -> Result<T> {
    let blocks = build_blocks(nodes, edges, lambda_spe, lambda_smo)?;
    let poses: Vec<Se3<T>> = nodes.iter().map(|n| n.pose).collect();
    Ok(objective(&blocks, &poses))
}

/// Levenberg–Marquardt over right perturbations `Tᵢ·exp(ξᵢ)` of every node
/// but the first, with central-difference Jacobians.
pub fn optimize<T: Real>(
    nodes: &[PoseNode<T>],
    edges: &[PoseEdge<T>],
    lambda_spe: T,
    lambda_smo: T,
    cfg: &SolverConfig,
) -> Result<(Vec<PoseNode<T>>, OptimizeReport)> {
    cfg.validate()?;
    if nodes.is_empty() {
        return Err(Error::invalid("pose graph has no nodes"));
    }
    if !(lambda_spe >= T::zero() && lambda_smo >= T::zero()) {
        return Err(Error::invalid("regularization weights must be non-negative"));
    }
    check_odometry_connected(nodes, edges)?;
    let blocks = build_blocks(nodes, edges, lambda_spe, lambda_smo)?;
    let n = nodes.len();
    let dim = 6 * (n - 1);
    let mut poses: Vec<Se3<T>> = nodes.iter().map(|x| x.pose).collect();
    let mut current = objective(&blocks, &poses);
    let mut report = OptimizeReport {
        initial_objective: current.as_f64(),
        ..OptimizeReport::default()
    };
    let h = T::lit(cfg.fd_step);
    let mut damping = T::lit(cfg.initial_damping);
    let max_damping = T::lit(cfg.max_damping);

    for it in 0..cfg.max_iterations {
        report.iterations = it + 1;
        if dim == 0 {
            report.converged = true;
            break;
        }
        // Residual and per-node Jacobian blocks, evaluated in parallel on a
        // read-only snapshot.
        let linearized: Vec<(Vector6<T>, Vec<(usize, Matrix6<T>)>)> = blocks
            .par_iter()
            .map(|b| {
                let r = b.residual(&poses, None);
                let jacs = b
                    .nodes()
                    .into_iter()
                    .filter(|&k| k > 0)
                    .map(|k| {
                        let mut j = Matrix6::zeros();
                        for c in 0..6 {
                            let mut xi = Vector6::zeros();
                            xi[c] = h;
                            let plus = poses[k] * se3_exp(&Twist(xi)).expect("finite step");
                            let minus = poses[k] * se3_exp(&Twist(-xi)).expect("finite step");
                            let d = (b.residual(&poses, Some((k, &plus))) - b.residual(&poses, Some((k, &minus))))
                                / (h + h);
                            j.set_column(c, &d);
                        }
                        (k, j)
                    })
                    .collect();
                (r, jacs)
            })
            .collect();
        let mut hess = DMatrix::<T>::zeros(dim, dim);
        let mut grad = DVector::<T>::zeros(dim);
        for (r, jacs) in &linearized {
            for (ka, ja) in jacs {
                let oa = 6 * (ka - 1);
                let mut g = grad.rows_mut(oa, 6);
                g += ja.transpose() * r;
                for (kb, jb) in jacs {
                    let ob = 6 * (kb - 1);
                    let mut blk = hess.view_mut((oa, ob), (6, 6));
                    blk += ja.transpose() * jb;
                }
            }
        }

        let mut accepted = false;
        let mut small_step = false;
        while damping <= max_damping {
            let mut damped = hess.clone();
            for i in 0..dim {
                damped[(i, i)] += damping;
            }
            let Some(chol) = damped.cholesky() else {
                damping *= T::lit(10.0);
                continue;
            };
            let delta = -chol.solve(&grad);
            if delta.iter().any(|v| !v.is_finite()) {
                damping *= T::lit(10.0);
                continue;
            }
            small_step = delta.norm() < T::lit(cfg.step_tolerance);
            let mut trial = poses.clone();
            for k in 1..n {
                let xi = Vector6::from_iterator(delta.rows(6 * (k - 1), 6).iter().copied());
                trial[k] = (poses[k] * se3_exp(&Twist(xi))?).renormalized();
            }
            let value = objective(&blocks, &trial);
            if value < current {
                poses = trial;
                current = value;
                damping = (damping / T::lit(10.0)).max(T::lit(1e-12));
                accepted = true;
                break;
            }
            if small_step {
                break;
            }
            damping *= T::lit(10.0);
        }
        report.objectives.push(current.as_f64());
        if accepted {
            report.accepted_steps += 1;
        }
        if small_step {
            report.converged = true;
            break;
        }
        if !accepted {
            report.aborted = damping > max_damping;
            break;
        }
    }
    report.final_damping = damping.as_f64();
    let mut out = nodes.to_vec();
    for (node, pose) in out.iter_mut().zip(poses) {
        node.pose = pose;
    }
    // Gauge node untouched, bit for bit.
    out[0].pose = nodes[0].pose;
    Ok((out, report))
}

fn write_pose<T: Real>(out: &mut String, p: &Se3<T>) {
    let q = p.quaternion();
    let q = q.as_ref();
    for v in [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w] {
        out.push_str(&format!(" {:.17e}", v.as_f64()));
    }
}

/// g2o-style text: `VERTEX_SE3:QUAT` and `EDGE_SE3:QUAT` lines, each edge
/// followed by its 21 upper-triangular information entries and a
/// `# CONF <value> KIND <kind>` comment.
pub fn write_g2o<T: Real, W: Write>(nodes: &[PoseNode<T>], edges: &[PoseEdge<T>], mut out: W) -> Result<()> {
    let mut s = String::new();
    for n in nodes {
        s.push_str(&format!("VERTEX_SE3:QUAT {}", n.id));
        write_pose(&mut s, &n.pose);
        s.push_str(&format!(" # TIME {:.17e}\n", n.timestamp));
    }
    for e in edges {
        s.push_str(&format!("EDGE_SE3:QUAT {} {}", e.from, e.to));
        write_pose(&mut s, &e.measured_relative);
        for r in 0..6 {
            for c in r..6 {
                s.push_str(&format!(" {:.17e}", e.information[(r, c)].as_f64()));
            }
        }
        s.push_str(&format!(" # CONF {:.17e} KIND {}\n", e.confidence.as_f64(), e.kind));
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn parse_pose<T: Real>(v: &[f64], line: usize) -> Result<Se3<T>> {
    let q = nalgebra::Quaternion::new(T::lit(v[6]), T::lit(v[3]), T::lit(v[4]), T::lit(v[5]));
    if !(q.norm() > T::zero()) {
        return Err(Error::parse(line, "zero quaternion"));
    }
    Ok(Se3::from_quaternion(
        &UnitQuaternion::from_quaternion(q),
        Vector3::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2])),
    ))
}

pub type PoseGraph<T> = (Vec<PoseNode<T>>, Vec<PoseEdge<T>>);

pub fn read_g2o<T: Real, R: BufRead>(input: R) -> Result<PoseGraph<T>> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let ln = i + 1;
        let (body, comment) = match line.split_once('#') {
            Some((b, c)) => (b, Some(c)),
            None => (line.as_str(), None),
        };
        let mut tok = body.split_whitespace();
        let Some(tag) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let nums = |s: &[&str]| -> Result<Vec<f64>> {
            s.iter()
                .map(|t| t.parse::<f64>().map_err(|e| Error::parse(ln, e.to_string())))
                .collect()
        };
        let tags: Vec<&str> = comment.map(|c| c.split_whitespace().collect()).unwrap_or_default();
        let tagged = |key: &str| tags.iter().position(|t| *t == key).and_then(|p| tags.get(p + 1)).copied();
        match tag {
            "VERTEX_SE3:QUAT" => {
                if rest.len() != 8 {
                    return Err(Error::parse(ln, "vertex needs id and 7 pose values"));
                }
                let id = rest[0].parse::<u64>().map_err(|e| Error::parse(ln, e.to_string()))?;
                let v = nums(&rest[1..])?;
                let t = match tagged("TIME") {
                    Some(s) => s.parse::<f64>().map_err(|e| Error::parse(ln, e.to_string()))?,
                    None => nodes.len() as f64,
                };
                nodes.push(PoseNode::new(id, parse_pose(&v, ln)?, t));
            }
            "EDGE_SE3:QUAT" => {
                if rest.len() != 2 + 7 + 21 {
                    return Err(Error::parse(ln, "edge needs 2 ids, 7 pose values and 21 information entries"));
                }
                let from = rest[0].parse::<u64>().map_err(|e| Error::parse(ln, e.to_string()))?;
                let to = rest[1].parse::<u64>().map_err(|e| Error::parse(ln, e.to_string()))?;
                let v = nums(&rest[2..])?;
                let mut info = Matrix6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = T::lit(v[k]);
                        info[(c, r)] = T::lit(v[k]);
                        k += 1;
                    }
                }
                let confidence = match tagged("CONF") {
                    Some(s) => T::lit(s.parse::<f64>().map_err(|e| Error::parse(ln, e.to_string()))?),
                    None => T::one(),
                };
                let kind = match tagged("KIND") {
                    Some(s) => s.parse().map_err(|e: Error| Error::parse(ln, e.to_string()))?,
                    None => EdgeKind::Odometry,
                };
                edges.push(PoseEdge {
                    from,
                    to,
                    measured_relative: parse_pose(&v[..7], ln)?,
                    information: info,
                    confidence,
                    kind,
                });
            }
            other => return Err(Error::parse(ln, format!("unknown record '{other}'"))),
        }
    }
    Ok((nodes, edges))
}
