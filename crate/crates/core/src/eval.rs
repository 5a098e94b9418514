//! All-rank top-K evaluation: Recall@K and NDCG@K over every unobserved item.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{InteractionDataset, Split};
use crate::linalg::dot;
use crate::model::LayerStack;
use crate::par::*;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("the {0:?} split is empty")]
    EmptySplit(Phase),
    #[error("cutoff list must be non-empty, strictly positive and ascending")]
    BadCutoffs,
    #[error("model covers {model} users / {model_items} items but dataset has {data} / {data_items}")]
    ShapeMismatch {
        model: usize,
        model_items: usize,
        data: usize,
        data_items: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    fn split(self) -> Split {
        match self {
            Phase::Val => Split::Val,
            Phase::Test => Split::Test,
        }
    }
}

/// Mean metrics over users with a non-empty target set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_evaluated_users: usize,
    pub num_skipped_users: usize,
}

impl MetricReport {
    fn position(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|p| self.ndcg[p])
    }

    /// `recall@K` / `ndcg@K` keyed map, ordered.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (p, k) in self.ks.iter().enumerate() {
            m.insert(format!("recall@{k}"), self.recall[p]);
            m.insert(format!("ndcg@{k}"), self.ndcg[p]);
        }
        m
    }
}

/// Discount of 1-based rank `p`.
#[inline]
pub fn discount(p: usize) -> f64 {
    1.0 / ((p + 1) as f64).log2()
}

/// Ideal DCG for `n_targets` relevant items at cutoff `k`.
pub fn idcg(k: usize, n_targets: usize) -> f64 {
    (1..=k.min(n_targets)).map(discount).sum()
}

/// Descending score, ties broken by ascending item index.
#[inline]
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Top `k` items by score, skipping masked entries (`-inf`). Ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s != f64::NEG_INFINITY)
        .map(|(i, &s)| (s, i))
        .collect();
    let k = k.min(cands.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, rank_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank_order);
    cands.into_iter().map(|(_, i)| i).collect()
}

/// Recall and NDCG at each cutoff for one ranked list. `targets` must be sorted.
pub fn user_metrics(ranked: &[usize], targets: &[usize], ks: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(ks.len());
    let mut ndcg = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (pos, item) in ranked.iter().take(k).enumerate() {
            if targets.binary_search(item).is_ok() {
                hits += 1;
                dcg += discount(pos + 1);
            }
        }
        recall.push(hits as f64 / targets.len() as f64);
        ndcg.push(dcg / idcg(k, targets.len()));
    }
    (recall, ndcg)
}

/// Ranks every item for each user with targets in `phase`. Train items are masked;
/// in the test phase validation items are masked too.
pub fn evaluate(
    stack: &LayerStack,
    ds: &InteractionDataset,
    phase: Phase,
    ks: &[usize],
) -> Result<MetricReport, EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadCutoffs);
    }
    if stack.num_users() != ds.num_users || stack.num_items() != ds.num_items {
        return Err(EvalError::ShapeMismatch {
            model: stack.num_users(),
            model_items: stack.num_items(),
            data: ds.num_users,
            data_items: ds.num_items,
        });
    }
    if ds.edges(phase.split()).is_empty() {
        return Err(EvalError::EmptySplit(phase));
    }
    let targets = ds.user_items(phase.split());
    let train = ds.user_items(Split::Train);
    let val = match phase {
        Phase::Test => ds.user_items(Split::Val),
        Phase::Val => vec![Vec::new(); ds.num_users],
    };
    let max_k = *ks.last().expect("non-empty");

    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..ds.num_users)
        .into_par_iter()
        .map(|u| {
            if targets[u].is_empty() {
                return None;
            }
            let eu = stack.readout_user.row(u);
            let mut scores: Vec<f64> = (0..ds.num_items)
                .map(|i| dot(eu, stack.readout_item.row(i)))
                .collect();
            for &i in train[u].iter().chain(&val[u]) {
                scores[i] = f64::NEG_INFINITY;
            }
            let ranked = top_k(&scores, max_k);
            Some(user_metrics(&ranked, &targets[u], ks))
        })
        .collect();

    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut evaluated = 0usize;
    for (r, n) in per_user.iter().flatten() {
        evaluated += 1;
        for p in 0..ks.len() {
            recall[p] += r[p];
            ndcg[p] += n[p];
        }
    }
    for p in 0..ks.len() {
        recall[p] /= evaluated as f64;
        ndcg[p] /= evaluated as f64;
    }
    Ok(MetricReport {
        ks: ks.to_vec(),
        recall,
        ndcg,
        num_evaluated_users: evaluated,
        num_skipped_users: ds.num_users - evaluated,
    })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    metrics: BTreeMap<String, f64>,
    num_evaluated_users: usize,
    num_skipped_users: usize,
    phase: Phase,
    config_hash: &'a str,
    seed: u64,
    epoch: usize,
    version: &'a str,
    masking: &'static str,
}

/// Writes a JSON report with `recall@K` / `ndcg@K` keys and run metadata.
pub fn write_report(
    path: impl AsRef<Path>,
    report: &MetricReport,
    phase: Phase,
    meta: &crate::artifact::ArtifactMeta,
    epoch: usize,
) -> io::Result<()> {
    let file = ReportFile {
        metrics: report.metric_map(),
        num_evaluated_users: report.num_evaluated_users,
        num_skipped_users: report.num_skipped_users,
        phase,
        config_hash: &meta.config_hash,
        seed: meta.seed,
        epoch,
        version: &meta.version,
        masking: match phase {
            Phase::Val => "train",
            Phase::Test => "train+val",
        },
    };
    let text = serde_json::to_string_pretty(&file).map_err(io::Error::other)?;
    fs::write(path, text + "\n")
}
