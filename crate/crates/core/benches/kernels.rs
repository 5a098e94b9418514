//! Kernel timings on a synthetic graph.
//!
//! The group name records whether the build runs on rayon or the sequential
//! fallback, so `cargo bench` and `cargo bench --no-default-features` line up in
//! criterion's report. The parallel build also reruns each kernel on a one-thread pool.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkGroup, Criterion};
use criterion::measurement::WallTime;
use nlgcl_core::dataset::{InteractionDataset, TrainTriple};
use nlgcl_core::eval::{evaluate, Phase};
use nlgcl_core::graph::{build_graph, normalize, NormalizedAdjacency};
use nlgcl_core::loss::{nl_loss, total_loss, Anchors, GradSink, LayerGrads, LossConfig, Scope};
use nlgcl_core::model::{init_xavier, propagate, EmbeddingState};
use nlgcl_core::par::is_parallel;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const USERS: usize = 600;
const ITEMS: usize = 800;
const PER_USER: usize = 40;
const DIM: usize = 64;
const LAYERS: usize = 2;

struct Fixture {
    ds: InteractionDataset,
    adj: NormalizedAdjacency,
    state: EmbeddingState,
    batch: Vec<TrainTriple>,
}

fn fixture() -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for u in 0..USERS {
        let mut items: Vec<usize> = (0..ITEMS).collect();
        items.shuffle(&mut r);
        test.push((u, items[0]));
        val.push((u, items[1]));
        train.extend(items[2..PER_USER].iter().map(|&i| (u, i)));
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let ds = InteractionDataset { num_users: USERS, num_items: ITEMS, train, val, test, seed: 17 };
    let adj = normalize(build_graph(&ds).unwrap());
    let state = init_xavier(USERS, ITEMS, DIM, 17);
    let batch = (0..4096)
        .map(|_| {
            let (u, p) = ds.train[r.random_range(0..ds.train.len())];
            TrainTriple { u, p, n: r.random_range(0..ITEMS) }
        })
        .collect();
    Fixture { ds, adj, state, batch }
}

/// Runs one timed call, either directly or inside a dedicated pool.
type Exec<'a> = &'a dyn Fn(&mut (dyn FnMut() + Send));

fn kernels(g: &mut BenchmarkGroup<'_, WallTime>, f: &Fixture, tag: &str, exec: Exec<'_>) {
    let stack = propagate(&f.state, &f.adj, LAYERS).unwrap();
    g.bench_function(format!("propagate/{tag}"), |b| {
        b.iter(|| exec(&mut || {
            black_box(propagate(&f.state, &f.adj, LAYERS).unwrap());
        }))
    });
    for scope in [Scope::Heterogeneous, Scope::Entire] {
        let cfg = LossConfig { scope, ..LossConfig::default() };
        let anchors = Anchors::from_triples(&f.batch, &f.adj.graph);
        g.bench_function(format!("nl_loss_{}/{tag}", scope.as_str()), |b| {
            b.iter(|| exec(&mut || {
                let mut lg = LayerGrads::zeros_like(&stack);
                let sink = Some(GradSink { grads: &mut lg, weight: 1.0 });
                black_box(nl_loss(&stack, &f.adj.graph, &cfg, &anchors, sink).unwrap());
            }))
        });
    }
    let cfg = LossConfig { lambda1: 1e-5, ..LossConfig::default() };
    g.bench_function(format!("total_loss/{tag}"), |b| {
        b.iter(|| exec(&mut || {
            black_box(total_loss(&f.state, &stack, &f.adj, &f.batch, &cfg).unwrap());
        }))
    });
    g.bench_function(format!("evaluate/{tag}"), |b| {
        b.iter(|| exec(&mut || {
            black_box(evaluate(&stack, &f.ds, Phase::Val, &[10, 20]).unwrap());
        }))
    });
}

fn bench(c: &mut Criterion) {
    let f = fixture();
    let name = if is_parallel() { "rayon" } else { "sequential" };
    let mut g = c.benchmark_group(name);
    g.sample_size(10);
    kernels(&mut g, &f, "default", &|run| run());
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        kernels(&mut g, &f, "one_thread", &|run| pool.install(run));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
