//! Graph collaborative filtering with neighbor-layer contrastive learning.
//!
//! LightGCN propagation over a user–item bipartite graph, trained with BPR plus a
//! contrastive objective whose views are the adjacent propagation layers themselves:
//! a node's layer-`g` embedding is pulled toward its neighbors' layer-`g + 1`
//! embeddings and pushed away from every other candidate at that layer.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: TSV ingestion, k-core filtering, per-user splits, triple sampling
//! - [`graph`]: CSR bipartite adjacency, symmetric normalization, SpMM kernels
//! - [`model`]: embeddings, propagation, readout and scoring
//! - [`loss`]: BPR, contrastive (heterogeneous / entire scope), L2, exact gradients
//! - [`optim`]: Adam with bias correction
//! - [`trainer`]: epochs, early stopping, checkpoints, grid sweeps
//! - [`eval`]: all-rank Recall@K / NDCG@K
//! - [`analysis`]: spectrum of the normalized adjacency, decay curves, cost model
//!
//! Data-parallel loops go through [`par`], which maps onto rayon when the
//! `parallel` feature is enabled and onto plain iterators otherwise. Every
//! reduction is ordered, so both builds produce bit-identical numbers.

pub mod analysis;
pub mod artifact;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod trainer;

/// Version string embedded in every artifact.
pub const CODE_VERSION: &str = concat!("nlgcl-", env!("CARGO_PKG_VERSION"));
