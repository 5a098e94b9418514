//! Bipartite user–item adjacency in CSR form, its symmetric normalization, and
//! the two rectangular SpMM kernels that make up one propagation step.
//!
//! The square `(|U|+|I|)²` adjacency is never formed. Only the user→item block
//! and its transpose are stored; each carries the per-edge weight
//! `1 / sqrt(deg(u) * deg(i))`.

use thiserror::Error;

use crate::dataset::{Edge, InteractionDataset};
use crate::linalg::Matrix;
use crate::par::*;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({user}, {item}) is out of range for {num_users} users / {num_items} items")]
    EdgeOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("user {0} has no training interactions")]
    IsolatedUser(usize),
    #[error("dimension mismatch: expected {expected} rows, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Compressed sparse rows: `indices[offsets[r]..offsets[r + 1]]` are the
/// strictly increasing column indices of row `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Csr {
    fn from_sorted_pairs(num_rows: usize, pairs: &[(usize, usize)]) -> Self {
        let mut offsets = vec![0usize; num_rows + 1];
        for &(r, _) in pairs {
            offsets[r + 1] += 1;
        }
        for r in 0..num_rows {
            offsets[r + 1] += offsets[r];
        }
        let indices = pairs.iter().map(|&(_, c)| c).collect();
        Self { offsets, indices }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    #[inline]
    pub fn degree(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub user_to_items: Csr,
    pub item_to_users: Csr,
}

impl BipartiteGraph {
    /// Builds both orientations from an edge list. Duplicate edges collapse.
    ///
    /// Every user must have at least one edge. Items without training edges are
    /// kept as isolated nodes: a per-user split can route all of an item's
    /// interactions to validation or test.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: &[Edge],
    ) -> Result<Self, GraphError> {
        for &(u, i) in edges {
            if u >= num_users || i >= num_items {
                return Err(GraphError::EdgeOutOfRange {
                    user: u,
                    item: i,
                    num_users,
                    num_items,
                });
            }
        }
        let mut ui: Vec<(usize, usize)> = edges.to_vec();
        ui.sort_unstable();
        ui.dedup();
        let mut iu: Vec<(usize, usize)> = ui.iter().map(|&(u, i)| (i, u)).collect();
        iu.sort_unstable();
        let user_to_items = Csr::from_sorted_pairs(num_users, &ui);
        let item_to_users = Csr::from_sorted_pairs(num_items, &iu);
        if let Some(u) = (0..num_users).find(|&u| user_to_items.degree(u) == 0) {
            return Err(GraphError::IsolatedUser(u));
        }
        Ok(Self {
            num_users,
            num_items,
            user_to_items,
            item_to_users,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.user_to_items.nnz()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn user_deg(&self, u: usize) -> usize {
        self.user_to_items.degree(u)
    }

    pub fn item_deg(&self, i: usize) -> usize {
        self.item_to_users.degree(i)
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        (0..self.num_users).map(|u| self.user_deg(u)).collect()
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        (0..self.num_items).map(|i| self.item_deg(i)).collect()
    }

    /// Neighbor items of `u`, ascending.
    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        self.user_to_items.row(u)
    }

    /// Neighbor users of `i`, ascending.
    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        self.item_to_users.row(i)
    }

    pub fn edges(&self) -> Vec<Edge> {
        (0..self.num_users)
            .flat_map(|u| self.user_neighbors(u).iter().map(move |&i| (u, i)))
            .collect()
    }
}

/// Graph over the training interactions of `ds`.
pub fn build_graph(ds: &InteractionDataset) -> Result<BipartiteGraph, GraphError> {
    BipartiteGraph::from_edges(ds.num_users, ds.num_items, &ds.train)
}

/// Symmetrically normalized adjacency. `user_weights[k]` belongs to the edge at
/// `user_to_items.indices[k]`; `item_weights` mirrors it for the transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub graph: BipartiteGraph,
    pub user_weights: Vec<f64>,
    pub item_weights: Vec<f64>,
}

pub fn normalize(graph: BipartiteGraph) -> NormalizedAdjacency {
    let weight = |du: usize, di: usize| 1.0 / ((du as f64) * (di as f64)).sqrt();
    let mut user_weights = Vec::with_capacity(graph.num_edges());
    for u in 0..graph.num_users {
        let du = graph.user_deg(u);
        user_weights.extend(graph.user_neighbors(u).iter().map(|&i| weight(du, graph.item_deg(i))));
    }
    let mut item_weights = Vec::with_capacity(graph.num_edges());
    for i in 0..graph.num_items {
        let di = graph.item_deg(i);
        item_weights.extend(graph.item_neighbors(i).iter().map(|&u| weight(graph.user_deg(u), di)));
    }
    NormalizedAdjacency {
        graph,
        user_weights,
        item_weights,
    }
}

impl NormalizedAdjacency {
    pub fn num_users(&self) -> usize {
        self.graph.num_users
    }

    pub fn num_items(&self) -> usize {
        self.graph.num_items
    }

    /// Weight of edge `(u, i)`, or `None` if absent.
    pub fn weight(&self, u: usize, i: usize) -> Option<f64> {
        let csr = &self.graph.user_to_items;
        let row = csr.row(u);
        row.binary_search(&i)
            .ok()
            .map(|k| self.user_weights[csr.offsets[u] + k])
    }

    /// Dense `|U|×|I|` normalized block. Small graphs only.
    pub fn dense_block(&self) -> Matrix {
        let mut m = Matrix::zeros(self.num_users(), self.num_items());
        for u in 0..self.num_users() {
            for k in self.graph.user_to_items.row_range(u) {
                m.set(u, self.graph.user_to_items.indices[k], self.user_weights[k]);
            }
        }
        m
    }
}

fn spmm(csr: &Csr, weights: &[f64], x: &Matrix, out_rows: usize) -> Matrix {
    let d = x.cols();
    let mut out = Matrix::zeros(out_rows, d);
    if d == 0 {
        return out;
    }
    out.par_rows_mut().enumerate().for_each(|(r, row)| {
        for k in csr.row_range(r) {
            let w = weights[k];
            let src = x.row(csr.indices[k]);
            for (o, s) in row.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    });
    out
}

/// `R̃ · X`: row `u` is the weighted sum of `u`'s item rows, ascending item order.
pub fn spmm_items_to_users(
    adj: &NormalizedAdjacency,
    x_items: &Matrix,
) -> Result<Matrix, GraphError> {
    if x_items.rows() != adj.num_items() {
        return Err(GraphError::DimensionMismatch {
            expected: adj.num_items(),
            got: x_items.rows(),
        });
    }
    Ok(spmm(
        &adj.graph.user_to_items,
        &adj.user_weights,
        x_items,
        adj.num_users(),
    ))
}

/// `R̃ᵀ · Y`: row `i` is the weighted sum of `i`'s user rows, ascending user order.
pub fn spmm_users_to_items(
    adj: &NormalizedAdjacency,
    x_users: &Matrix,
) -> Result<Matrix, GraphError> {
    if x_users.rows() != adj.num_users() {
        return Err(GraphError::DimensionMismatch {
            expected: adj.num_users(),
            got: x_users.rows(),
        });
    }
    Ok(spmm(
        &adj.graph.item_to_users,
        &adj.item_weights,
        x_users,
        adj.num_items(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_edge() -> NormalizedAdjacency {
        normalize(BipartiteGraph::from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap())
    }

    #[test]
    fn degrees_count_edges() {
        let g = BipartiteGraph::from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap();
        assert_eq!(g.user_degrees(), vec![2, 1]);
        assert_eq!(g.item_degrees(), vec![2, 1]);
    }

    #[test]
    fn orientations_are_transposes() {
        let g = BipartiteGraph::from_edges(3, 4, &[(2, 3), (0, 1), (1, 1), (0, 0), (2, 0)]).unwrap();
        let mut from_items: Vec<Edge> = (0..g.num_items)
            .flat_map(|i| g.item_neighbors(i).iter().map(move |&u| (u, i)))
            .collect();
        from_items.sort_unstable();
        assert_eq!(g.edges(), from_items);
        for u in 0..g.num_users {
            assert!(g.user_neighbors(u).windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn single_edge_graph() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        assert_eq!(g.user_to_items.nnz(), 1);
        assert_eq!(g.item_to_users.nnz(), 1);
        let adj = normalize(g);
        assert_eq!(adj.weight(0, 0), Some(1.0));
    }

    #[test]
    fn isolated_user_rejected_and_range_checked() {
        assert_eq!(
            BipartiteGraph::from_edges(2, 1, &[(0, 0)]),
            Err(GraphError::IsolatedUser(1))
        );
        assert!(matches!(
            BipartiteGraph::from_edges(1, 1, &[(0, 3)]),
            Err(GraphError::EdgeOutOfRange { .. })
        ));
        // Isolated items are allowed.
        let g = BipartiteGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        assert_eq!(g.item_deg(1), 0);
    }

    #[test]
    fn three_edge_weights() {
        let adj = three_edge();
        assert_eq!(adj.weight(0, 0), Some(0.5));
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((adj.weight(0, 1).unwrap() - r).abs() < 1e-15);
        assert!((adj.weight(1, 0).unwrap() - r).abs() < 1e-15);
        assert_eq!(adj.weight(1, 1), None);
        // Transpose-side weights agree.
        for i in 0..2 {
            for k in adj.graph.item_to_users.row_range(i) {
                let u = adj.graph.item_to_users.indices[k];
                assert_eq!(Some(adj.item_weights[k]), adj.weight(u, i));
            }
        }
    }

    #[test]
    fn regular_graph_weights() {
        // Complete 3x3 bipartite: all degrees 3.
        let edges: Vec<Edge> = (0..3).flat_map(|u| (0..3).map(move |i| (u, i))).collect();
        let adj = normalize(BipartiteGraph::from_edges(3, 3, &edges).unwrap());
        for w in adj.user_weights.iter().chain(&adj.item_weights) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn spmm_three_edge_rows() {
        let adj = three_edge();
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = spmm_items_to_users(&adj, &x).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((y.get(1, 0) - r).abs() < 1e-15);
        assert!((y.get(1, 1) - 2.0 * r).abs() < 1e-15);
        assert!((y.get(0, 0) - (0.5 + 3.0 * r)).abs() < 1e-15);
        let zero = spmm_items_to_users(&adj, &Matrix::zeros(2, 3)).unwrap();
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spmm_dimension_mismatch() {
        let adj = three_edge();
        assert_eq!(
            spmm_items_to_users(&adj, &Matrix::zeros(3, 2)),
            Err(GraphError::DimensionMismatch { expected: 2, got: 3 })
        );
        assert!(spmm_users_to_items(&adj, &Matrix::zeros(5, 2)).is_err());
    }

    fn random_graph() -> impl Strategy<Value = (usize, usize, Vec<Edge>)> {
        (1usize..20, 1usize..25).prop_flat_map(|(nu, ni)| {
            let extra = prop::collection::vec((0..nu, 0..ni), 0..60);
            let firsts = prop::collection::vec(0..ni, nu);
            (Just(nu), Just(ni), firsts, extra).prop_map(|(nu, ni, firsts, extra)| {
                let mut e: Vec<Edge> = firsts.into_iter().enumerate().collect();
                e.extend(extra);
                (nu, ni, e)
            })
        })
    }

    fn dense_mul(a: &Matrix, x: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), x.cols(), |r, c| {
            (0..a.cols()).map(|k| a.get(r, k) * x.get(k, c)).sum()
        })
    }

    fn transpose(a: &Matrix) -> Matrix {
        Matrix::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i))
    }

    proptest! {
        #[test]
        fn sparse_matches_dense_and_adjoint(
            (nu, ni, edges) in random_graph(),
            seed in 0u64..1000,
        ) {
            let adj = normalize(BipartiteGraph::from_edges(nu, ni, &edges).unwrap());
            let block = adj.dense_block();
            let d = 3;
            let x = Matrix::from_fn(ni, d, |r, c| ((r * 31 + c * 7) as f64 + seed as f64).sin());
            let y = Matrix::from_fn(nu, d, |r, c| ((r * 13 + c * 5) as f64 - seed as f64).cos());
            let ax = spmm_items_to_users(&adj, &x).unwrap();
            let aty = spmm_users_to_items(&adj, &y).unwrap();
            prop_assert!(ax.max_abs_diff(&dense_mul(&block, &x)) < 1e-12);
            prop_assert!(aty.max_abs_diff(&dense_mul(&transpose(&block), &y)) < 1e-12);
            prop_assert!((ax.frobenius_dot(&y) - x.frobenius_dot(&aty)).abs() < 1e-10);
            for w in adj.user_weights.iter() {
                prop_assert!(*w > 0.0 && *w <= 1.0);
            }
        }
    }
}
