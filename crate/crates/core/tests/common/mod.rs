//! Fixtures and brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use nlgcl_core::dataset::{InteractionDataset, TrainTriple};
use nlgcl_core::graph::{normalize, BipartiteGraph, NormalizedAdjacency};
use nlgcl_core::linalg::Matrix;
use nlgcl_core::loss::{
    bpr_loss, l2_reg, nl_loss, Anchors, Denominator, GradSink, LayerGrads, LossConfig, Scope,
};
use nlgcl_core::model::{propagate, EmbeddingState, LayerStack};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
pub struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

pub fn csum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = Compensated::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

pub fn cdot(a: &[f64], b: &[f64]) -> f64 {
    csum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Every user has at least one item; items may be isolated unless `connected`.
pub fn random_graph(r: &mut ChaCha8Rng, nu: usize, ni: usize, density: f64, connected: bool) -> BipartiteGraph {
    let mut edges = Vec::new();
    if connected {
        // Random spanning tree over the interleaved node list, then extra edges.
        let mut nodes: Vec<(bool, usize)> = (0..nu).map(|u| (true, u)).chain((0..ni).map(|i| (false, i))).collect();
        nodes.shuffle(r);
        let first_user = nodes.iter().position(|n| n.0).unwrap();
        nodes.swap(0, first_user);
        let first_item = nodes.iter().position(|n| !n.0).unwrap();
        nodes.swap(1, first_item);
        edges.push((nodes[0].1, nodes[1].1));
        for k in 2..nodes.len() {
            let (is_user, idx) = nodes[k];
            let partners: Vec<usize> = nodes[..k].iter().filter(|n| n.0 != is_user).map(|n| n.1).collect();
            let p = partners[r.random_range(0..partners.len())];
            edges.push(if is_user { (idx, p) } else { (p, idx) });
        }
    } else {
        for u in 0..nu {
            edges.push((u, r.random_range(0..ni)));
        }
    }
    for u in 0..nu {
        for i in 0..ni {
            if r.random_bool(density) {
                edges.push((u, i));
            }
        }
    }
    BipartiteGraph::from_edges(nu, ni, &edges).unwrap()
}

pub fn random_adj(r: &mut ChaCha8Rng, max_nodes: usize) -> NormalizedAdjacency {
    let nu = r.random_range(1..max_nodes);
    let ni = r.random_range(1..=(max_nodes - nu));
    normalize(random_graph(r, nu, ni, 0.35, false))
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).unwrap();
    Matrix::from_fn(rows, cols, |_, _| n.sample(r))
}

pub fn random_state(r: &mut ChaCha8Rng, nu: usize, ni: usize, d: usize, std: f64) -> EmbeddingState {
    EmbeddingState {
        user: random_matrix(r, nu, d, std),
        item: random_matrix(r, ni, d, std),
    }
}

/// One triple per edge with a uniformly drawn non-neighbor negative where one exists.
pub fn random_triples(r: &mut ChaCha8Rng, graph: &BipartiteGraph) -> Vec<TrainTriple> {
    let mut out = Vec::new();
    for (u, p) in graph.edges() {
        let negs: Vec<usize> = (0..graph.num_items)
            .filter(|i| graph.user_neighbors(u).binary_search(i).is_err())
            .collect();
        let n = if negs.is_empty() { (p + 1) % graph.num_items } else { negs[r.random_range(0..negs.len())] };
        out.push(TrainTriple { u, p, n });
    }
    out
}

/// Dense `[[0, R̃], [R̃ᵀ, 0]]` built straight from degrees.
pub fn dense_normalized(graph: &BipartiteGraph) -> Vec<Vec<f64>> {
    let n = graph.num_users + graph.num_items;
    let mut a = vec![vec![0.0; n]; n];
    for (u, i) in graph.edges() {
        let w = 1.0 / ((graph.user_deg(u) * graph.item_deg(i)) as f64).sqrt();
        a[u][graph.num_users + i] = w;
        a[graph.num_users + i][u] = w;
    }
    a
}

pub fn dense_mul(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = x[0].len();
    a.iter()
        .map(|row| (0..d).map(|c| csum(row.iter().zip(x).map(|(w, xr)| w * xr[c]))).collect())
        .collect()
}

/// Oracle per-anchor term for one group, straight from the definition.
fn oracle_term(anchor: &[f64], positives: &[&[f64]], candidates: &[&[f64]], tau: f64, normalize: bool) -> f64 {
    let prep = |v: &[f64]| -> Vec<f64> {
        if normalize {
            let n = cdot(v, v).sqrt();
            if n == 0.0 {
                return v.to_vec();
            }
            v.iter().map(|x| x / n).collect()
        } else {
            v.to_vec()
        }
    };
    let a = prep(anchor);
    let pos = csum(positives.iter().map(|p| cdot(&a, &prep(p)) / tau));
    let logits: Vec<f64> = candidates.iter().map(|c| cdot(&a, &prep(c)) / tau).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + csum(logits.iter().map(|s| (s - m).exp())).ln();
    -(pos - lse) / positives.len() as f64
}

/// Direct-summation contrastive loss `(user side, item side)`.
pub fn oracle_nl(stack: &LayerStack, graph: &BipartiteGraph, cfg: &LossConfig, scope: Scope, anchors: &Anchors) -> (f64, f64) {
    let (cand_items, cand_users): (Vec<usize>, Vec<usize>) = match cfg.denominator {
        Denominator::Full => ((0..graph.num_items).collect(), (0..graph.num_users).collect()),
        Denominator::InBatch => (anchors.items.clone(), anchors.users.clone()),
    };
    let mut user_side = Compensated::default();
    let mut item_side = Compensated::default();
    for g in 0..cfg.groups {
        let (ul, il) = (&stack.user_layers, &stack.item_layers);
        for &u in &anchors.users {
            let pos: Vec<&[f64]> = graph.user_neighbors(u).iter().map(|&i| il[g + 1].row(i)).collect();
            let mut cands: Vec<&[f64]> = cand_items.iter().map(|&i| il[g + 1].row(i)).collect();
            if scope == Scope::Entire {
                cands.extend(cand_users.iter().map(|&v| ul[g + 1].row(v)));
            }
            user_side.add(oracle_term(ul[g].row(u), &pos, &cands, cfg.tau, cfg.normalize));
        }
        for &i in &anchors.items {
            let pos: Vec<&[f64]> = graph.item_neighbors(i).iter().map(|&u| ul[g + 1].row(u)).collect();
            let mut cands: Vec<&[f64]> = cand_users.iter().map(|&v| ul[g + 1].row(v)).collect();
            if scope == Scope::Entire {
                cands = cand_items.iter().map(|&j| il[g + 1].row(j)).chain(cands).collect();
            }
            item_side.add(oracle_term(il[g].row(i), &pos, &cands, cfg.tau, cfg.normalize));
        }
    }
    let gu = cfg.groups as f64 * anchors.users.len().max(1) as f64;
    let gi = cfg.groups as f64 * anchors.items.len().max(1) as f64;
    (user_side.value() / gu, item_side.value() / gi)
}

/// Which objective a gradient check targets.
#[derive(Debug, Clone, Copy)]
pub enum Objective {
    Bpr,
    Nl(Scope),
    Reg,
    Total,
}

pub struct Problem<'a> {
    pub adj: &'a NormalizedAdjacency,
    pub layers: usize,
    pub triples: &'a [TrainTriple],
    pub anchors: &'a Anchors,
    pub cfg: LossConfig,
}

impl Problem<'_> {
    pub fn value(&self, obj: Objective, state: &EmbeddingState) -> f64 {
        let stack = propagate(state, self.adj, self.layers).unwrap();
        match obj {
            Objective::Bpr => bpr_loss(&stack, self.triples, None).unwrap(),
            Objective::Nl(scope) => {
                let cfg = LossConfig { scope, ..self.cfg.clone() };
                nl_loss(&stack, &self.adj.graph, &cfg, self.anchors, None).unwrap().sum()
            }
            Objective::Reg => l2_reg(state, self.triples, None),
            Objective::Total => {
                let cfg = LossConfig { anchors: nlgcl_core::loss::AnchorMode::Batch, ..self.cfg.clone() };
                nlgcl_core::loss::total_loss(state, &stack, self.adj, self.triples, &cfg).unwrap().0.total
            }
        }
    }

    pub fn gradient(&self, obj: Objective, state: &EmbeddingState) -> (Matrix, Matrix) {
        let stack = propagate(state, self.adj, self.layers).unwrap();
        let mut lg = LayerGrads::zeros_like(&stack);
        match obj {
            Objective::Bpr => {
                bpr_loss(&stack, self.triples, Some(GradSink { grads: &mut lg, weight: 1.0 })).unwrap();
            }
            Objective::Nl(scope) => {
                let cfg = LossConfig { scope, ..self.cfg.clone() };
                nl_loss(&stack, &self.adj.graph, &cfg, self.anchors, Some(GradSink { grads: &mut lg, weight: 1.0 })).unwrap();
            }
            Objective::Reg => {
                let mut g = nlgcl_core::loss::GradBuffer::zeros_like(state);
                l2_reg(state, self.triples, Some(&mut g));
                return (g.user, g.item);
            }
            Objective::Total => {
                let cfg = LossConfig { anchors: nlgcl_core::loss::AnchorMode::Batch, ..self.cfg.clone() };
                let g = nlgcl_core::loss::total_loss(state, &stack, self.adj, self.triples, &cfg).unwrap().1;
                return (g.user, g.item);
            }
        }
        let g = lg.backprop(self.adj).unwrap();
        (g.user, g.item)
    }
}

/// Largest entrywise relative error between the analytic gradient and central
/// differences. Entries where both magnitudes fall below `floor` are compared
/// absolutely against `floor`.
pub fn gradient_check(p: &Problem<'_>, obj: Objective, state: &EmbeddingState, h: f64, floor: f64) -> f64 {
    let (gu, gi) = p.gradient(obj, state);
    let mut worst: f64 = 0.0;
    for (is_user, analytic) in [(true, &gu), (false, &gi)] {
        let rows = analytic.rows();
        for r in 0..rows {
            for c in 0..analytic.cols() {
                let mut plus = state.clone();
                let mut minus = state.clone();
                let (mp, mm) = if is_user { (&mut plus.user, &mut minus.user) } else { (&mut plus.item, &mut minus.item) };
                let x = mp.get(r, c);
                mp.set(r, c, x + h);
                mm.set(r, c, x - h);
                let numeric = (p.value(obj, &plus) - p.value(obj, &minus)) / (2.0 * h);
                let a = analytic.get(r, c);
                let scale = a.abs().max(numeric.abs()).max(floor);
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    worst
}

/// Recall and NDCG by sorting every unmasked item, ties to the lower index.
pub fn brute_force_metrics(scores: &[f64], masked: &[usize], targets: &[usize], k: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !masked.contains(i)).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let top = &order[..k.min(order.len())];
    let hits: Vec<usize> = top
        .iter()
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(p, _)| p)
        .collect();
    let dcg: f64 = hits.iter().map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    let idcg: f64 = (0..k.min(targets.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    (hits.len() as f64 / targets.len() as f64, dcg / idcg)
}

/// Small dataset: each user gets a handful of items, one to val and one to test.
pub fn toy_dataset(seed: u64, nu: usize, ni: usize, per_user: usize) -> InteractionDataset {
    let mut r = rng(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for u in 0..nu {
        let mut items: Vec<usize> = (0..ni).collect();
        items.shuffle(&mut r);
        // A shared preference signal so that training has something to learn.
        items.sort_by_key(|&i| (i + u) % 3 != 0);
        let mine = &items[..per_user];
        test.push((u, mine[0]));
        val.push((u, mine[1]));
        for &i in &mine[2..] {
            train.push((u, i));
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    InteractionDataset { num_users: nu, num_items: ni, train, val, test, seed }
}
