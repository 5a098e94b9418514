//! Spectral view of the normalized adjacency and the layer-wise decay it implies.
//!
//! With `Σ^(0) = I`, layer `l` of a linear propagation has covariance
//! `Ã^{2l}`, whose eigenvalues are `λ_k^{2l}`. The Gaussian log-determinant then
//! changes by `Σ_k ln(λ_k²)/2` per layer, which is never positive because
//! `|λ_k| ≤ 1`: every propagation step loses information, and earlier layer
//! pairs keep more shared signal than later ones. A connected graph always has
//! `λ_max = 1`, so the decay rate is governed by the largest eigenvalue
//! magnitude strictly inside the unit circle (`lambda_sub`).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::artifact::ArtifactMeta;
use crate::graph::NormalizedAdjacency;

pub const DEFAULT_NODE_CAP: usize = 2000;
pub const EPS_ZERO: f64 = 1e-10;
pub const EPS_GAP: f64 = 1e-6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("graph has {nodes} nodes, above the densification cap of {cap}")]
    DensificationCap { nodes: usize, cap: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Eigenvalues of the full symmetric `(|U|+|I|)²` matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    /// Largest `|λ|` strictly below `1 - EPS_GAP` (0 if none).
    pub lambda_sub: f64,
    /// Count of `|λ| < EPS_ZERO`.
    pub num_zero: usize,
}

/// Dense symmetric `[[0, R̃], [R̃ᵀ, 0]]`.
pub fn dense_adjacency(adj: &NormalizedAdjacency) -> DMatrix<f64> {
    let nu = adj.num_users();
    let n = adj.graph.num_nodes();
    let mut m = DMatrix::zeros(n, n);
    for u in 0..nu {
        for k in adj.graph.user_to_items.row_range(u) {
            let i = adj.graph.user_to_items.indices[k];
            let w = adj.user_weights[k];
            m[(u, nu + i)] = w;
            m[(nu + i, u)] = w;
        }
    }
    m
}

pub fn eigendecompose(
    adj: &NormalizedAdjacency,
    node_cap: usize,
) -> Result<SpectrumReport, AnalysisError> {
    let nodes = adj.graph.num_nodes();
    if nodes > node_cap {
        return Err(AnalysisError::DensificationCap {
            nodes,
            cap: node_cap,
        });
    }
    let eig = SymmetricEigen::new(dense_adjacency(adj));
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(spectrum_from_eigenvalues(eigenvalues))
}

/// Populates the derived fields from a descending eigenvalue list.
pub fn spectrum_from_eigenvalues(eigenvalues: Vec<f64>) -> SpectrumReport {
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let lambda_sub = eigenvalues
        .iter()
        .map(|l| l.abs())
        .filter(|a| *a < 1.0 - EPS_GAP)
        .fold(0.0, f64::max);
    let num_zero = eigenvalues.iter().filter(|l| l.abs() < EPS_ZERO).count();
    SpectrumReport {
        eigenvalues,
        lambda_max,
        lambda_sub,
        num_zero,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayCurves {
    /// `l = 0..=L`.
    pub entropy_proxy: Vec<f64>,
    /// `l = 1..=L`, index 0 is layer 1.
    pub literal_mi: Vec<f64>,
    /// `l = 1..=L`, index 0 is layer 1.
    pub snr_decay: Vec<f64>,
}

pub fn decay_curves(spec: &SpectrumReport, num_layers: usize) -> DecayCurves {
    assert!(num_layers >= 1, "decay curves need at least one layer");
    let nonzero: Vec<f64> = spec
        .eigenvalues
        .iter()
        .copied()
        .filter(|l| l.abs() >= EPS_ZERO)
        .collect();
    let per_layer: f64 = nonzero.iter().map(|l| (l * l).ln() / 2.0).sum();
    let mi: f64 = -nonzero.iter().map(|l| l.abs().ln()).sum::<f64>();
    DecayCurves {
        entropy_proxy: (0..=num_layers).map(|l| l as f64 * per_layer).collect(),
        literal_mi: vec![mi; num_layers],
        snr_decay: (1..=num_layers)
            .map(|l| spec.lambda_sub.powi(2 * l as i32))
            .collect(),
    }
}

/// Graph and batch sizes that drive the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostInputs {
    pub num_edges: usize,
    pub num_layers: usize,
    pub dim: usize,
    /// Nodes in a batch (`M`).
    pub batch_nodes: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityEstimate {
    pub encoder_ops: u64,
    pub bpr_ops: u64,
    pub cl_ops_hetero: u64,
    pub cl_ops_entire: u64,
    pub total_hetero: u64,
    pub total_entire: u64,
}

/// Per-batch operation counts.
///
/// Encoder `2|E|Ld`, BPR `2Md`, contrastive `G·M·M·d` for the heterogeneous
/// scope (each of `M` anchors against `M` in-batch candidates), twice that for
/// the entire scope, which draws candidates from both node types.
pub fn estimate_complexity(c: CostInputs) -> ComplexityEstimate {
    let (e, l, d, m, g) = (
        c.num_edges as u64,
        c.num_layers as u64,
        c.dim as u64,
        c.batch_nodes as u64,
        c.groups as u64,
    );
    let encoder_ops = 2 * e * l * d;
    let bpr_ops = 2 * m * d;
    let cl_ops_hetero = g * m * m * d;
    let cl_ops_entire = 2 * cl_ops_hetero;
    ComplexityEstimate {
        encoder_ops,
        bpr_ops,
        cl_ops_hetero,
        cl_ops_entire,
        total_hetero: encoder_ops + bpr_ops + cl_ops_hetero,
        total_entire: encoder_ops + bpr_ops + cl_ops_entire,
    }
}

/// `spectrum.csv`: `k,eigenvalue`.
pub fn write_spectrum_csv(
    path: impl AsRef<Path>,
    spec: &SpectrumReport,
    meta: &ArtifactMeta,
) -> io::Result<()> {
    let mut s = format!("{meta}\n");
    let _ = writeln!(
        s,
        "# lambda_max={:?} lambda_sub={:?} num_zero={}",
        spec.lambda_max, spec.lambda_sub, spec.num_zero
    );
    s.push_str("k,eigenvalue\n");
    for (k, l) in spec.eigenvalues.iter().enumerate() {
        let _ = writeln!(s, "{k},{l:?}");
    }
    fs::write(path, s)
}

/// `curves.csv`: `l,entropy_proxy,literal_mi,snr_decay` (layer-0 row leaves the last two empty).
pub fn write_curves_csv(
    path: impl AsRef<Path>,
    curves: &DecayCurves,
    meta: &ArtifactMeta,
) -> io::Result<()> {
    let mut s = format!("{meta}\nl,entropy_proxy,literal_mi,snr_decay\n");
    for (l, h) in curves.entropy_proxy.iter().enumerate() {
        if l == 0 {
            let _ = writeln!(s, "0,{h:?},,");
        } else {
            let _ = writeln!(
                s,
                "{l},{h:?},{:?},{:?}",
                curves.literal_mi[l - 1],
                curves.snr_decay[l - 1]
            );
        }
    }
    fs::write(path, s)
}
