//! Training objective and its exact gradient with respect to the base embeddings.
//!
//! The joint objective is
//!
//! ```text
//! L = L_bpr + λ1 · (L_nl_user + L_nl_item) + λ2 · reg
//! ```
//!
//! where the neighbor-layer contrastive terms treat a node's layer-`g` embedding
//! as the anchor, its neighbors' layer-`g + 1` embeddings as positives, and every
//! candidate at layer `g + 1` as the softmax denominator. For a user anchor `u`:
//!
//! ```text
//! term(u, g) = -(1 / |N_u|) · [ Σ_{i ∈ N_u} s(u, i) - logsumexp_{c ∈ C} s(u, c) ]
//! s(a, c)    = e_a^(g) · e_c^(g+1) / τ
//! ```
//!
//! with `C` the items (heterogeneous scope) or all users and items (entire
//! scope). Items mirror this with users as positives. Each side is averaged over
//! the `G` groups and the anchor set.
//!
//! Gradients are accumulated per layer in a [`LayerGrads`] and pushed back to
//! layer 0 with the transpose of propagation ([`LayerGrads::backprop`]). Since
//! the normalized adjacency is symmetric, the adjoint of one propagation step is
//! the same pair of SpMM kernels with the roles of users and items swapped.

use std::fmt;

use thiserror::Error;

use crate::dataset::TrainTriple;
use crate::graph::{
    spmm_items_to_users, spmm_users_to_items, BipartiteGraph, GraphError, NormalizedAdjacency,
};
use crate::linalg::{axpy, dot, gemm_ab, gemm_abt, gemm_atb, Matrix};
use crate::model::{EmbeddingState, LayerStack};
use crate::par::*;

/// Anchor rows processed per block in the contrastive kernel.
const ANCHOR_BLOCK: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{kind} anchor {index} has no neighbors")]
    EmptyNeighborhood { kind: NodeKind, index: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    User,
    Item,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
        })
    }
}

/// Which nodes form the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    /// Opposite node type only: items for user anchors, users for item anchors.
    Heterogeneous,
    /// Every user and item at the next layer.
    Entire,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Heterogeneous => "hetero",
            Scope::Entire => "entire",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hetero" | "heterogeneous" => Ok(Scope::Heterogeneous),
            "entire" => Ok(Scope::Entire),
            _ => Err(format!("unknown scope {s:?} (expected hetero or entire)")),
        }
    }
}

/// Candidate pool for the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Denominator {
    /// All nodes of the scope.
    Full,
    /// Only the nodes of the scope that appear in the current anchor set.
    InBatch,
}

impl Denominator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Denominator::Full => "full",
            Denominator::InBatch => "in_batch",
        }
    }
}

impl std::str::FromStr for Denominator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Denominator::Full),
            "in_batch" | "in-batch" | "inbatch" => Ok(Denominator::InBatch),
            _ => Err(format!("unknown denominator {s:?} (expected full or in_batch)")),
        }
    }
}

/// Which nodes act as contrastive anchors in a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnchorMode {
    /// Distinct users and items of the batch's triples.
    Batch,
    /// Every user and item with at least one training neighbor.
    All,
}

impl AnchorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnchorMode::Batch => "batch",
            AnchorMode::All => "all",
        }
    }
}

impl std::str::FromStr for AnchorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(AnchorMode::Batch),
            "all" => Ok(AnchorMode::All),
            _ => Err(format!("unknown anchor mode {s:?} (expected batch or all)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Number of adjacent layer pairs `(g, g + 1)`, `g = 0..groups`.
    pub groups: usize,
    pub scope: Scope,
    pub denominator: Denominator,
    pub anchors: AnchorMode,
    /// L2-normalize embeddings before the contrastive dot products.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda1: 1e-5,
            lambda2: 1e-4,
            groups: 1,
            scope: Scope::Heterogeneous,
            denominator: Denominator::Full,
            anchors: AnchorMode::Batch,
            normalize: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_layers: usize) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(LossError::InvalidConfig("lambda1 and lambda2 must be >= 0".into()));
        }
        if self.groups < 1 || self.groups > num_layers {
            return Err(LossError::InvalidConfig(format!(
                "groups must satisfy 1 <= G <= L, got G={} L={num_layers}",
                self.groups
            )));
        }
        Ok(())
    }
}

/// The layer pairs `(anchor layer, positive layer)` the contrastive loss uses:
/// the first `groups` adjacent pairs.
pub fn contrastive_layer_pairs(groups: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..groups).map(|g| (g, g + 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub bpr: f64,
    pub nl_user: f64,
    pub nl_item: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn zero() -> Self {
        Self {
            bpr: 0.0,
            nl_user: 0.0,
            nl_item: 0.0,
            reg: 0.0,
            total: 0.0,
        }
    }

    /// Field-wise sum, used to aggregate batches into an epoch.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.bpr += other.bpr;
        self.nl_user += other.nl_user;
        self.nl_item += other.nl_item;
        self.reg += other.reg;
        self.total += other.total;
    }
}

/// Gradient of the objective with respect to the base embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub user: Matrix,
    pub item: Matrix,
}

impl GradBuffer {
    pub fn zeros(num_users: usize, num_items: usize, d: usize) -> Self {
        Self {
            user: Matrix::zeros(num_users, d),
            item: Matrix::zeros(num_items, d),
        }
    }

    pub fn zeros_like(state: &EmbeddingState) -> Self {
        Self::zeros(state.num_users(), state.num_items(), state.dim())
    }

    pub fn clear(&mut self) {
        self.user.fill(0.0);
        self.item.fill(0.0);
    }

    pub fn axpy(&mut self, alpha: f64, other: &GradBuffer) {
        self.user.axpy(alpha, &other.user);
        self.item.axpy(alpha, &other.item);
    }
}

/// Per-layer gradient accumulator (layers `0..=L` plus the readouts).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub user: Vec<Matrix>,
    pub item: Vec<Matrix>,
    pub readout_user: Matrix,
    pub readout_item: Matrix,
}

impl LayerGrads {
    pub fn zeros_like(stack: &LayerStack) -> Self {
        let (nu, ni, d) = (stack.num_users(), stack.num_items(), stack.dim());
        let layers = stack.num_layers() + 1;
        Self {
            user: (0..layers).map(|_| Matrix::zeros(nu, d)).collect(),
            item: (0..layers).map(|_| Matrix::zeros(ni, d)).collect(),
            readout_user: Matrix::zeros(nu, d),
            readout_item: Matrix::zeros(ni, d),
        }
    }

    /// Folds the readout gradient into every layer (weight `1/(L+1)`), then walks
    /// the propagation backwards to layer 0.
    pub fn backprop(mut self, adj: &NormalizedAdjacency) -> Result<GradBuffer, GraphError> {
        let layers = self.user.len();
        let w = 1.0 / layers as f64;
        for l in 0..layers {
            self.user[l].axpy(w, &self.readout_user);
            self.item[l].axpy(w, &self.readout_item);
        }
        for l in (1..layers).rev() {
            let to_users = spmm_items_to_users(adj, &self.item[l])?;
            let to_items = spmm_users_to_items(adj, &self.user[l])?;
            self.user[l - 1].axpy(1.0, &to_users);
            self.item[l - 1].axpy(1.0, &to_items);
        }
        let user = self.user.swap_remove(0);
        let item = self.item.swap_remove(0);
        Ok(GradBuffer { user, item })
    }
}

/// Destination for a loss term's gradient, scaled by `weight`.
pub struct GradSink<'a> {
    pub grads: &'a mut LayerGrads,
    pub weight: f64,
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted log-sum-exp. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log softmax(xs)[k]` for every `k`.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// `Σ -ln σ(y_up - y_un)` over the triples.
///
/// The gradient with respect to the readouts goes into `grads.readout_*`.
pub fn bpr_loss(
    stack: &LayerStack,
    triples: &[TrainTriple],
    grads: Option<GradSink<'_>>,
) -> Result<f64, LossError> {
    if triples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let ru = &stack.readout_user;
    let ri = &stack.readout_item;
    let mut loss = 0.0;
    let mut grads = grads;
    for t in triples {
        let eu = ru.row(t.u);
        let x = dot(eu, ri.row(t.p)) - dot(eu, ri.row(t.n));
        loss += softplus(-x);
        if let Some(sink) = grads.as_mut() {
            // d/dx softplus(-x) = -σ(-x)
            let g = -sigmoid(-x) * sink.weight;
            let diff: Vec<f64> = ri.row(t.p).iter().zip(ri.row(t.n)).map(|(p, n)| p - n).collect();
            axpy(g, &diff, sink.grads.readout_user.row_mut(t.u));
            axpy(g, eu, sink.grads.readout_item.row_mut(t.p));
            axpy(-g, eu, sink.grads.readout_item.row_mut(t.n));
        }
    }
    Ok(loss)
}

/// Sorted distinct anchor nodes for the contrastive terms.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Anchors {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

impl Anchors {
    /// Distinct users, positives and negatives of the batch. Nodes without
    /// training neighbors are left out since they have no positives.
    pub fn from_triples(triples: &[TrainTriple], graph: &BipartiteGraph) -> Self {
        let mut users: Vec<usize> = triples.iter().map(|t| t.u).collect();
        let mut items: Vec<usize> = triples.iter().flat_map(|t| [t.p, t.n]).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        users.retain(|&u| graph.user_deg(u) > 0);
        items.retain(|&i| graph.item_deg(i) > 0);
        Self { users, items }
    }

    /// Every non-isolated user and item.
    pub fn all(graph: &BipartiteGraph) -> Self {
        Self {
            users: (0..graph.num_users).filter(|&u| graph.user_deg(u) > 0).collect(),
            items: (0..graph.num_items).filter(|&i| graph.item_deg(i) > 0).collect(),
        }
    }

    pub fn for_mode(mode: AnchorMode, triples: &[TrainTriple], graph: &BipartiteGraph) -> Self {
        match mode {
            AnchorMode::Batch => Self::from_triples(triples, graph),
            AnchorMode::All => Self::all(graph),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlLoss {
    pub user: f64,
    pub item: f64,
}

impl NlLoss {
    pub fn sum(&self) -> f64 {
        self.user + self.item
    }
}

/// Row-normalizes a matrix, returning the unit rows and the original norms.
fn normalize_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = vec![0.0; m.rows()];
    for (r, norm) in norms.iter_mut().enumerate() {
        let n = dot(m.row(r), m.row(r)).sqrt();
        *norm = n;
        if n > 0.0 {
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
    }
    (out, norms)
}

/// Maps a gradient w.r.t. unit rows back through the normalization.
fn normalize_rows_backward(unit: &Matrix, norms: &[f64], grad: &mut Matrix) {
    for (r, &n) in norms.iter().enumerate() {
        let g = grad.row_mut(r);
        if n == 0.0 {
            g.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let x = unit.row(r);
        let proj = dot(x, g);
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = (*gi - proj * xi) / n;
        }
    }
}

/// Layers `0..=G` as seen by the contrastive kernel (possibly row-normalized).
struct WorkingLayers {
    user: Vec<Matrix>,
    item: Vec<Matrix>,
    user_norms: Vec<Vec<f64>>,
    item_norms: Vec<Vec<f64>>,
}

impl WorkingLayers {
    fn new(stack: &LayerStack, groups: usize, normalize: bool) -> Self {
        let take = |layers: &[Matrix]| -> (Vec<Matrix>, Vec<Vec<f64>>) {
            layers[..=groups]
                .iter()
                .map(|m| {
                    if normalize {
                        normalize_rows(m)
                    } else {
                        (m.clone(), Vec::new())
                    }
                })
                .unzip()
        };
        let (user, user_norms) = take(&stack.user_layers);
        let (item, item_norms) = take(&stack.item_layers);
        Self {
            user,
            item,
            user_norms,
            item_norms,
        }
    }
}

/// One side (user or item anchors) for one group, fully specified.
struct SideSpec<'a> {
    anchors: &'a [usize],
    /// Anchor-kind embeddings at layer g.
    anchor_layer: &'a Matrix,
    /// Opposite-kind embeddings at layer g+1 (positives).
    positive_layer: &'a Matrix,
    /// Anchor-kind neighbor lists.
    neighbors: &'a crate::graph::Csr,
    /// Opposite-kind neighbor lists (for the positive-gradient pass).
    reverse_neighbors: &'a crate::graph::Csr,
    /// Gathered candidate rows.
    candidates: &'a Matrix,
    /// Candidate column of each positive-layer row, `NO_SLOT` if it is not a candidate.
    slots: &'a [usize],
    tau: f64,
    /// Multiplier applied to every term: 1 / (G · |anchors|).
    weight: f64,
}

struct SideOutput {
    /// Unweighted per-anchor terms, in anchor order.
    terms: Vec<f64>,
    grad_anchor: Matrix,
    grad_positive: Matrix,
    grad_candidates: Matrix,
}

struct BlockOutput {
    terms: Vec<f64>,
    grad_anchor: Option<Matrix>,
    grad_candidates: Option<Matrix>,
}

fn side_block(spec: &SideSpec<'_>, block: &[usize], with_grad: bool) -> BlockOutput {
    let d = spec.anchor_layer.cols();
    let nc = spec.candidates.rows();
    let xa = spec.anchor_layer.gather_rows(block);
    let mut logits = Matrix::zeros(block.len(), nc);
    gemm_abt(1.0 / spec.tau, &xa, spec.candidates, 0.0, &mut logits);

    let mut terms = Vec::with_capacity(block.len());
    let mut grad_anchor = with_grad.then(|| Matrix::zeros(block.len(), d));
    for (r, &a) in block.iter().enumerate() {
        let pos = spec.neighbors.row(a);
        let inv_deg = 1.0 / pos.len() as f64;
        let row = logits.row_mut(r);
        // Reuse the candidate logit when there is one so that a lone positive
        // cancels exactly against its own denominator entry.
        let pos_sum: f64 = pos
            .iter()
            .map(|&p| match spec.slots[p] {
                NO_SLOT => dot(xa.row(r), spec.positive_layer.row(p)) / spec.tau,
                c => row[c],
            })
            .sum();
        let lse = log_sum_exp(row);
        terms.push(-(pos_sum - lse) * inv_deg);
        if let Some(ga) = grad_anchor.as_mut() {
            // Softmax weights, pre-scaled into d(term)/d(dot product).
            let scale = spec.weight * inv_deg / spec.tau;
            row.iter_mut().for_each(|s| *s = (*s - lse).exp() * scale);
            let g = ga.row_mut(r);
            for &p in pos {
                axpy(-scale, spec.positive_layer.row(p), g);
            }
        }
    }
    let grad_candidates = grad_anchor.as_mut().map(|ga| {
        // logits now hold the softmax gradient coefficients
        gemm_ab(1.0, &logits, spec.candidates, 1.0, ga);
        let mut gc = Matrix::zeros(nc, d);
        gemm_atb(1.0, &logits, &xa, 0.0, &mut gc);
        gc
    });
    BlockOutput {
        terms,
        grad_anchor,
        grad_candidates,
    }
}

fn run_side(spec: &SideSpec<'_>, with_grad: bool) -> SideOutput {
    let d = spec.anchor_layer.cols();
    let blocks: Vec<&[usize]> = spec.anchors.chunks(ANCHOR_BLOCK).collect();
    let outputs: Vec<BlockOutput> = blocks
        .par_iter()
        .map(|block| side_block(spec, block, with_grad))
        .collect();

    let mut terms = Vec::with_capacity(spec.anchors.len());
    let mut grad_anchor = Matrix::zeros(spec.anchor_layer.rows(), d);
    let mut grad_candidates = Matrix::zeros(spec.candidates.rows(), d);
    for (block, out) in blocks.iter().zip(outputs) {
        terms.extend_from_slice(&out.terms);
        if let Some(ga) = out.grad_anchor {
            for (r, &a) in block.iter().enumerate() {
                grad_anchor.row_mut(a).copy_from_slice(ga.row(r));
            }
        }
        if let Some(gc) = out.grad_candidates {
            grad_candidates.axpy(1.0, &gc);
        }
    }

    let mut grad_positive = Matrix::zeros(spec.positive_layer.rows(), d);
    if with_grad {
        // Positive pairs: node j receives -w/(|N_a| τ) · x_a from each anchor neighbor a.
        let mut coef = vec![0.0; spec.anchor_layer.rows()];
        for &a in spec.anchors {
            coef[a] = -spec.weight / (spec.neighbors.degree(a) as f64 * spec.tau);
        }
        let rev = spec.reverse_neighbors;
        let layer = spec.anchor_layer;
        grad_positive
            .par_rows_mut()
            .enumerate()
            .for_each(|(j, g)| {
                for &a in rev.row(j) {
                    if coef[a] != 0.0 {
                        axpy(coef[a], layer.row(a), g);
                    }
                }
            });
    }
    SideOutput {
        terms,
        grad_anchor,
        grad_positive,
        grad_candidates,
    }
}

const NO_SLOT: usize = usize::MAX;

fn candidate_slots(rows: usize, candidates: &[usize], offset: usize) -> Vec<usize> {
    let mut slots = vec![NO_SLOT; rows];
    for (k, &c) in candidates.iter().enumerate() {
        slots[c] = offset + k;
    }
    slots
}

/// Candidate rows for one side: `items` then `users` of the next layer.
fn gather_candidates(item_next: &Matrix, user_next: &Matrix, items: &[usize], users: &[usize]) -> Matrix {
    Matrix::vstack(&item_next.gather_rows(items), &user_next.gather_rows(users))
}

fn scatter_rows_add(dst: &mut Matrix, rows: &[usize], src: &Matrix, offset: usize) {
    for (k, &r) in rows.iter().enumerate() {
        axpy(1.0, src.row(offset + k), dst.row_mut(r));
    }
}

/// Per-anchor contrastive terms for both sides, summed over groups (not averaged).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTerms {
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

struct NlResult {
    loss: NlLoss,
    terms: AnchorTerms,
}

fn check_anchors(graph: &BipartiteGraph, anchors: &Anchors) -> Result<(), LossError> {
    for &u in &anchors.users {
        if u >= graph.num_users || graph.user_deg(u) == 0 {
            return Err(LossError::EmptyNeighborhood {
                kind: NodeKind::User,
                index: u,
            });
        }
    }
    for &i in &anchors.items {
        if i >= graph.num_items || graph.item_deg(i) == 0 {
            return Err(LossError::EmptyNeighborhood {
                kind: NodeKind::Item,
                index: i,
            });
        }
    }
    Ok(())
}

fn nl_loss_impl(
    stack: &LayerStack,
    graph: &BipartiteGraph,
    cfg: &LossConfig,
    scope: Scope,
    anchors: &Anchors,
    sink: Option<GradSink<'_>>,
) -> Result<NlResult, LossError> {
    cfg.validate(stack.num_layers())?;
    check_anchors(graph, anchors)?;
    let groups = cfg.groups;
    let work = WorkingLayers::new(stack, groups, cfg.normalize);
    let with_grad = sink.is_some();
    let d = stack.dim();

    let all_items: Vec<usize> = (0..graph.num_items).collect();
    let all_users: Vec<usize> = (0..graph.num_users).collect();
    let (cand_items, cand_users): (&[usize], &[usize]) = match cfg.denominator {
        Denominator::Full => (&all_items, &all_users),
        Denominator::InBatch => (&anchors.items, &anchors.users),
    };
    let none: &[usize] = &[];
    // (items, users) candidate index lists per side.
    let (user_side_cands, item_side_cands) = match scope {
        Scope::Heterogeneous => ((cand_items, none), (none, cand_users)),
        Scope::Entire => ((cand_items, cand_users), (cand_items, cand_users)),
    };

    let mut grad_user: Vec<Matrix> = (0..=groups).map(|_| Matrix::zeros(graph.num_users, d)).collect();
    let mut grad_item: Vec<Matrix> = (0..=groups).map(|_| Matrix::zeros(graph.num_items, d)).collect();
    let mut user_terms = vec![0.0; anchors.users.len()];
    let mut item_terms = vec![0.0; anchors.items.len()];
    let mut loss = NlLoss { user: 0.0, item: 0.0 };

    for (g, next) in contrastive_layer_pairs(groups) {
        for kind in [NodeKind::User, NodeKind::Item] {
            let (anchor_ids, anchor_layer, positive_layer, neighbors, reverse, (ci, cu)) = match kind {
                NodeKind::User => (
                    &anchors.users,
                    &work.user[g],
                    &work.item[next],
                    &graph.user_to_items,
                    &graph.item_to_users,
                    user_side_cands,
                ),
                NodeKind::Item => (
                    &anchors.items,
                    &work.item[g],
                    &work.user[next],
                    &graph.item_to_users,
                    &graph.user_to_items,
                    item_side_cands,
                ),
            };
            if anchor_ids.is_empty() {
                continue;
            }
            let candidates = gather_candidates(&work.item[next], &work.user[next], ci, cu);
            let slots = match kind {
                NodeKind::User => candidate_slots(positive_layer.rows(), ci, 0),
                NodeKind::Item => candidate_slots(positive_layer.rows(), cu, ci.len()),
            };
            let spec = SideSpec {
                anchors: anchor_ids,
                anchor_layer,
                positive_layer,
                neighbors,
                reverse_neighbors: reverse,
                candidates: &candidates,
                slots: &slots,
                tau: cfg.tau,
                weight: 1.0 / (groups as f64 * anchor_ids.len() as f64),
            };
            let out = run_side(&spec, with_grad);
            let side_sum: f64 = out.terms.iter().sum();
            let (side_loss, side_terms) = match kind {
                NodeKind::User => (&mut loss.user, &mut user_terms),
                NodeKind::Item => (&mut loss.item, &mut item_terms),
            };
            *side_loss += side_sum * spec.weight;
            for (acc, t) in side_terms.iter_mut().zip(&out.terms) {
                *acc += t;
            }
            if with_grad {
                let (ga, gp) = match kind {
                    NodeKind::User => (&mut grad_user, &mut grad_item),
                    NodeKind::Item => (&mut grad_item, &mut grad_user),
                };
                ga[g].axpy(1.0, &out.grad_anchor);
                gp[next].axpy(1.0, &out.grad_positive);
                scatter_rows_add(&mut grad_item[next], ci, &out.grad_candidates, 0);
                scatter_rows_add(&mut grad_user[next], cu, &out.grad_candidates, ci.len());
            }
        }
    }

    if let Some(sink) = sink {
        for l in 0..=groups {
            if cfg.normalize {
                normalize_rows_backward(&work.user[l], &work.user_norms[l], &mut grad_user[l]);
                normalize_rows_backward(&work.item[l], &work.item_norms[l], &mut grad_item[l]);
            }
            sink.grads.user[l].axpy(sink.weight, &grad_user[l]);
            sink.grads.item[l].axpy(sink.weight, &grad_item[l]);
        }
    }
    if !(loss.user.is_finite() && loss.item.is_finite()) {
        return Err(LossError::NonFinite("contrastive loss"));
    }
    Ok(NlResult {
        loss,
        terms: AnchorTerms {
            users: user_terms,
            items: item_terms,
        },
    })
}

/// Contrastive loss with item candidates for user anchors and user candidates for item anchors.
pub fn nl_loss_hetero(
    stack: &LayerStack,
    graph: &BipartiteGraph,
    cfg: &LossConfig,
    anchors: &Anchors,
    grads: Option<GradSink<'_>>,
) -> Result<NlLoss, LossError> {
    nl_loss_impl(stack, graph, cfg, Scope::Heterogeneous, anchors, grads).map(|r| r.loss)
}

/// Contrastive loss with every user and item as candidates.
pub fn nl_loss_entire(
    stack: &LayerStack,
    graph: &BipartiteGraph,
    cfg: &LossConfig,
    anchors: &Anchors,
    grads: Option<GradSink<'_>>,
) -> Result<NlLoss, LossError> {
    nl_loss_impl(stack, graph, cfg, Scope::Entire, anchors, grads).map(|r| r.loss)
}

/// Dispatches on `cfg.scope`.
pub fn nl_loss(
    stack: &LayerStack,
    graph: &BipartiteGraph,
    cfg: &LossConfig,
    anchors: &Anchors,
    grads: Option<GradSink<'_>>,
) -> Result<NlLoss, LossError> {
    nl_loss_impl(stack, graph, cfg, cfg.scope, anchors, grads).map(|r| r.loss)
}

/// Per-anchor terms (summed over groups) for the given scope.
pub fn nl_anchor_terms(
    stack: &LayerStack,
    graph: &BipartiteGraph,
    cfg: &LossConfig,
    scope: Scope,
    anchors: &Anchors,
) -> Result<AnchorTerms, LossError> {
    nl_loss_impl(stack, graph, cfg, scope, anchors, None).map(|r| r.terms)
}

/// Squared norm of the batch's distinct user and item base rows, divided by the batch size.
pub fn l2_reg(
    state: &EmbeddingState,
    triples: &[TrainTriple],
    grads: Option<&mut GradBuffer>,
) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    let mut users: Vec<usize> = triples.iter().map(|t| t.u).collect();
    let mut items: Vec<usize> = triples.iter().flat_map(|t| [t.p, t.n]).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let inv = 1.0 / triples.len() as f64;
    let sq = |m: &Matrix, rows: &[usize]| rows.iter().map(|&r| dot(m.row(r), m.row(r))).sum::<f64>();
    let reg = (sq(&state.user, &users) + sq(&state.item, &items)) * inv;
    if let Some(g) = grads {
        for &u in &users {
            axpy(2.0 * inv, state.user.row(u), g.user.row_mut(u));
        }
        for &i in &items {
            axpy(2.0 * inv, state.item.row(i), g.item.row_mut(i));
        }
    }
    reg
}

/// Full objective and its gradient for one batch.
///
/// With `lambda1 == 0` the contrastive terms are skipped and reported as zero.
pub fn total_loss(
    state: &EmbeddingState,
    stack: &LayerStack,
    adj: &NormalizedAdjacency,
    triples: &[TrainTriple],
    cfg: &LossConfig,
) -> Result<(LossReport, GradBuffer), LossError> {
    cfg.validate(stack.num_layers())?;
    let mut layer_grads = LayerGrads::zeros_like(stack);
    let bpr = bpr_loss(
        stack,
        triples,
        Some(GradSink {
            grads: &mut layer_grads,
            weight: 1.0,
        }),
    )?;
    let nl = if cfg.lambda1 > 0.0 {
        let anchors = Anchors::for_mode(cfg.anchors, triples, &adj.graph);
        nl_loss(
            stack,
            &adj.graph,
            cfg,
            &anchors,
            Some(GradSink {
                grads: &mut layer_grads,
                weight: cfg.lambda1,
            }),
        )?
    } else {
        NlLoss { user: 0.0, item: 0.0 }
    };
    let mut grads = layer_grads.backprop(adj)?;
    let mut reg_grad = GradBuffer::zeros_like(state);
    let reg = l2_reg(state, triples, Some(&mut reg_grad));
    grads.axpy(cfg.lambda2, &reg_grad);
    let report = LossReport {
        bpr,
        nl_user: nl.user,
        nl_item: nl.item,
        reg,
        total: bpr + cfg.lambda1 * (nl.user + nl.item) + cfg.lambda2 * reg,
    };
    if !report.total.is_finite() {
        return Err(LossError::NonFinite("total loss"));
    }
    Ok((report, grads))
}
