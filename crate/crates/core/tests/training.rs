mod common;

use common::*;
use nlgcl_core::artifact::ArtifactMeta;
use nlgcl_core::config::TrainConfig;
use nlgcl_core::graph::{build_graph, normalize};
use nlgcl_core::trainer::sweep::{grid_sweep, Grid};
use nlgcl_core::trainer::{history_csv, train, Checkpoint, CheckpointError, TrainError, Trainer};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        seed: 7,
        batch_size: 64,
        dim: 8,
        layers: 2,
        lambda1: 1e-3,
        lr: 0.01,
        max_epochs: 6,
        patience: 50,
        eval_ks: vec![5, 10],
        record_wall_clock: false,
        ..TrainConfig::default()
    }
}

#[test]
fn bpr_trend_is_non_increasing() {
    let ds = toy_dataset(1, 30, 24, 8);
    let adj = normalize(build_graph(&ds).unwrap());
    let cfg = TrainConfig { lambda1: 0.0, max_epochs: 50, lr: 0.005, ..small_cfg() };
    let model = train(&ds, &adj, &cfg).unwrap();
    assert_eq!(model.history.len(), 50);
    let bpr: Vec<f64> = model.history.iter().map(|r| r.loss.bpr).collect();
    let windows: Vec<f64> = bpr.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
}

#[test]
fn never_improving_metric_stops_after_patience() {
    let ds = toy_dataset(2, 20, 15, 6);
    let adj = normalize(build_graph(&ds).unwrap());
    // lr = 0 freezes the embeddings, so validation NDCG never strictly improves.
    let cfg = TrainConfig { lr: 0.0, patience: 1, max_epochs: 30, ..small_cfg() };
    let mut t = Trainer::new(&ds, &adj, cfg).unwrap();
    let init = t.state().clone();
    t.run().unwrap();
    let m = t.finish();
    assert_eq!(m.epochs_run, 2);
    assert_eq!(m.best_epoch, 1);
    assert_eq!(m.best_state, init);
}

#[test]
fn same_seed_same_bytes() {
    let ds = toy_dataset(3, 25, 20, 7);
    let adj = normalize(build_graph(&ds).unwrap());
    let run = || {
        let mut t = Trainer::new(&ds, &adj, small_cfg()).unwrap();
        t.run().unwrap();
        (history_csv(t.history(), &t.meta()), t.checkpoint().to_bytes())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
    let (h3, _) = {
        let mut t = Trainer::new(&ds, &adj, TrainConfig { seed: 8, ..small_cfg() }).unwrap();
        t.run().unwrap();
        (history_csv(t.history(), &t.meta()), ())
    };
    assert_ne!(h1, h3);
}

#[test]
fn resume_matches_uninterrupted() {
    let ds = toy_dataset(4, 25, 20, 7);
    let adj = normalize(build_graph(&ds).unwrap());
    let cfg = TrainConfig { max_epochs: 5, ..small_cfg() };
    let mut full = Trainer::new(&ds, &adj, cfg.clone()).unwrap();
    full.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut first = Trainer::new(&ds, &adj, cfg.clone()).unwrap();
    for _ in 0..3 {
        first.run_epoch().unwrap();
    }
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&ds, &adj, cfg.clone(), Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());

    let other = TrainConfig { tau: 0.3, ..cfg };
    match Trainer::resume(&ds, &adj, other, Checkpoint::load(&path).unwrap()) {
        Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch { .. })) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("resume with a different config must fail"),
    }
}

#[test]
fn one_by_one_grid_equals_train() {
    let ds = toy_dataset(5, 20, 16, 6);
    let adj = normalize(build_graph(&ds).unwrap());
    let cfg = small_cfg();
    let grid: Grid = format!("lambda1={:?};tau={:?}", cfg.lambda1, cfg.tau).parse().unwrap();
    let sweep = grid_sweep(&ds, &adj, &cfg, &grid).unwrap();
    let model = train(&ds, &adj, &cfg).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.rows[0].best_val_ndcg10, model.best_val_ndcg10);
    assert_eq!(sweep.rows[0].test, model.test_report(&ds, &adj).unwrap());
}

#[test]
fn invalid_cells_are_skipped() {
    let ds = toy_dataset(6, 15, 12, 5);
    let adj = normalize(build_graph(&ds).unwrap());
    let cfg = TrainConfig { max_epochs: 2, ..small_cfg() };
    let grid: Grid = "layers=1,2;groups=1,2,3".parse().unwrap();
    let sweep = grid_sweep(&ds, &adj, &cfg, &grid).unwrap();
    assert_eq!(sweep.rows.len(), 3);
    assert_eq!(sweep.skipped.len(), 3);
    assert!(sweep.skipped.iter().all(|s| s.reason.contains("G <= L")));
    let csv = sweep.to_csv(&ArtifactMeta::new("abc", 7));
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "layers,groups,val_ndcg@10,test_recall@5,test_recall@10,test_ndcg@5,test_ndcg@10");
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn every_edge_once_per_epoch() {
    let ds = toy_dataset(7, 20, 16, 6);
    let adj = normalize(build_graph(&ds).unwrap());
    let t = Trainer::new(&ds, &adj, small_cfg()).unwrap();
    for epoch in 1..4 {
        let mut seen: Vec<(usize, usize)> = t.epoch_triples(epoch).iter().map(|x| (x.u, x.p)).collect();
        seen.sort_unstable();
        assert_eq!(seen, ds.train);
    }
    assert_ne!(t.epoch_triples(1), t.epoch_triples(2));
}
