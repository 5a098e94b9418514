mod common;

use common::*;
use nlgcl_core::analysis::{
    decay_curves, eigendecompose, estimate_complexity, CostInputs, DEFAULT_NODE_CAP,
};
use nlgcl_core::graph::{normalize, BipartiteGraph};
use rand::Rng;

#[test]
fn entropy_proxy_never_increases() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let nu = r.random_range(1..100);
        let ni = r.random_range(1..=(200 - nu));
        let adj = normalize(random_graph(&mut r, nu, ni, 0.03, true));
        let spec = eigendecompose(&adj, DEFAULT_NODE_CAP).unwrap();
        assert!((spec.lambda_max - 1.0).abs() < 1e-9, "connected graph has top eigenvalue 1");
        assert!(spec.eigenvalues.iter().all(|l| l.abs() <= 1.0 + 1e-9));
        let c = decay_curves(&spec, 4);
        assert!(c.entropy_proxy.windows(2).all(|w| w[1] <= w[0] + 1e-12), "seed {seed}");
        assert!(c.snr_decay.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn spectrum_is_symmetric_for_bipartite_graphs() {
    let mut r = rng(4);
    let adj = normalize(random_graph(&mut r, 7, 9, 0.3, true));
    let spec = eigendecompose(&adj, 100).unwrap();
    let n = spec.eigenvalues.len();
    for k in 0..n {
        assert!((spec.eigenvalues[k] + spec.eigenvalues[n - 1 - k]).abs() < 1e-9);
    }
    // |9 - 7| eigenvalues must vanish.
    assert!(spec.num_zero >= 2);
}

#[test]
fn three_edge_fixture() {
    let adj = normalize(BipartiteGraph::from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap());
    let spec = eigendecompose(&adj, DEFAULT_NODE_CAP).unwrap();
    for (a, b) in spec.eigenvalues.iter().zip([1.0, 0.5, -0.5, -1.0]) {
        assert!((a - b).abs() < 1e-9);
    }
    let c = decay_curves(&spec, 4);
    for w in c.entropy_proxy.windows(2) {
        assert!((w[1] - w[0] + 4f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn complexity_ratios_exact() {
    for groups in 1..=4 {
        for m in [1, 17, 4096] {
            let e = estimate_complexity(CostInputs { num_edges: 80_000, num_layers: 4, dim: 64, batch_nodes: m, groups });
            let one = estimate_complexity(CostInputs { num_edges: 80_000, num_layers: 4, dim: 64, batch_nodes: m, groups: 1 });
            assert_eq!(e.cl_ops_entire, 2 * e.cl_ops_hetero);
            assert_eq!(e.cl_ops_hetero, groups as u64 * one.cl_ops_hetero);
        }
    }
}
