mod common;

use common::*;
use nlgcl_core::dataset::InteractionDataset;
use nlgcl_core::eval::{evaluate, user_metrics, Phase};
use nlgcl_core::linalg::Matrix;
use nlgcl_core::model::LayerStack;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn matches_full_sort_with_ties() {
    for seed in 0..300 {
        let mut r = rng(seed);
        let ni = r.random_range(2..=20);
        let nu = r.random_range(1..6);
        // Coarse scores so ties are common.
        let users = Matrix::from_fn(nu, 1, |_, _| 1.0);
        let items = Matrix::from_fn(ni, 1, |_, _| r.random_range(0..4) as f64);
        let stack = LayerStack::from_layers(vec![users], vec![items]);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for u in 0..nu {
            let mut all: Vec<usize> = (0..ni).collect();
            all.shuffle(&mut r);
            let nt = r.random_range(0..ni / 2 + 1);
            let nv = r.random_range(0..=1.min(ni - nt - 1));
            let ns = r.random_range(1..=(ni - nt - nv));
            train.extend(all[..nt].iter().map(|&i| (u, i)));
            val.extend(all[nt..nt + nv].iter().map(|&i| (u, i)));
            test.extend(all[nt + nv..nt + nv + ns].iter().map(|&i| (u, i)));
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let ds = InteractionDataset { num_users: nu, num_items: ni, train, val, test, seed };
        let ks = [1, 3, 5, 10, 20];
        let rep = evaluate(&stack, &ds, Phase::Test, &ks).unwrap();
        let mut rec = vec![0.0; ks.len()];
        let mut nd = vec![0.0; ks.len()];
        for u in 0..nu {
            let targets: Vec<usize> = ds.test.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
            let masked: Vec<usize> = ds.train.iter().chain(&ds.val).filter(|e| e.0 == u).map(|e| e.1).collect();
            let scores: Vec<f64> = (0..ni).map(|i| stack.readout_item.get(i, 0)).collect();
            for (p, &k) in ks.iter().enumerate() {
                let (a, b) = brute_force_metrics(&scores, &masked, &targets, k);
                rec[p] += a / nu as f64;
                nd[p] += b / nu as f64;
            }
        }
        for p in 0..ks.len() {
            assert!((rep.recall[p] - rec[p]).abs() < 1e-12, "seed {seed} recall@{}", ks[p]);
            assert!((rep.ndcg[p] - nd[p]).abs() < 1e-12, "seed {seed} ndcg@{}", ks[p]);
        }
    }
}

#[test]
fn hand_derived_values() {
    let (_, n) = user_metrics(&[7, 8, 5, 1], &[5], &[10]);
    assert_eq!(n[0], 0.5);
    let (r, n) = user_metrics(&[3, 0, 1], &[3, 9], &[10]);
    assert_eq!(r[0], 0.5);
    assert!((n[0] - 0.61315).abs() < 5e-6);
}
