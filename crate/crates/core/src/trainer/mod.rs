//! Epoch loop: sample triples, step through shuffled batches, validate, early-stop.
//!
//! Randomness per epoch comes from named streams keyed by the epoch number, so a
//! run resumed from a checkpoint replays exactly the batches an uninterrupted
//! run would have seen.

pub mod checkpoint;
pub mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::artifact::ArtifactMeta;
use crate::config::{ConfigError, TrainConfig};
use crate::dataset::{DataError, InteractionDataset, NegativeSampler};
use crate::eval::{evaluate, EvalError, MetricReport, Phase};
use crate::graph::{GraphError, NormalizedAdjacency};
use crate::loss::{total_loss, LossError, LossReport};
use crate::model::{init_xavier, propagate, EmbeddingState, LayerStack};
use crate::optim::{adam_step, AdamState, OptimError};
use crate::rng;

pub use checkpoint::{Checkpoint, CheckpointError};

/// Validation cutoff monitored for early stopping.
pub const MONITOR_K: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Loss {
        epoch: usize,
        batch: usize,
        #[source]
        source: LossError,
    },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Optim {
        epoch: usize,
        batch: usize,
        #[source]
        source: OptimError,
    },
    #[error("epoch {epoch}, batch {batch}: non-finite loss")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("model shape does not match the dataset")]
    ShapeMismatch,
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
}

impl TrainError {
    /// True for failures of the numerics rather than of inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::Optim { .. }
                | TrainError::Loss {
                    source: LossError::NonFinite(_),
                    ..
                }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
        }
    }
}

impl EarlyStopState {
    /// Records an epoch's metric. Returns true on a strict improvement.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            true
        } else {
            self.epochs_since_improve += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.epochs_since_improve >= patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sums over the epoch's batches.
    pub loss: LossReport,
    pub val_ndcg10: f64,
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str = "epoch,bpr,nl_user,nl_item,reg,total,val_ndcg@10,seconds";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:.3}",
            self.epoch, l.bpr, l.nl_user, l.nl_item, l.reg, l.total, self.val_ndcg10, self.seconds
        )
    }
}

pub fn history_csv(history: &[EpochRecord], meta: &ArtifactMeta) -> String {
    let mut s = format!("{meta}\n{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn write_history(
    path: impl AsRef<Path>,
    history: &[EpochRecord],
    meta: &ArtifactMeta,
) -> io::Result<()> {
    fs::write(path, history_csv(history, meta))
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    /// Embeddings from the epoch with the best validation NDCG@10.
    pub best_state: EmbeddingState,
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn stack(&self, adj: &NormalizedAdjacency) -> Result<LayerStack, GraphError> {
        propagate(&self.best_state, adj, self.config.layers)
    }

    /// All-rank test metrics at `config.eval_ks` for the best state.
    pub fn test_report(
        &self,
        ds: &InteractionDataset,
        adj: &NormalizedAdjacency,
    ) -> Result<MetricReport, TrainError> {
        let stack = self.stack(adj)?;
        Ok(evaluate(&stack, ds, Phase::Test, &self.config.eval_ks)?)
    }
}

pub struct Trainer<'a> {
    ds: &'a InteractionDataset,
    adj: &'a NormalizedAdjacency,
    cfg: TrainConfig,
    config_hash: String,
    sampler: NegativeSampler,
    state: EmbeddingState,
    adam: AdamState,
    epoch: usize,
    early: EarlyStopState,
    best_state: EmbeddingState,
    history: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ds: &'a InteractionDataset,
        adj: &'a NormalizedAdjacency,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if adj.num_users() != ds.num_users || adj.num_items() != ds.num_items {
            return Err(TrainError::ShapeMismatch);
        }
        let sampler = NegativeSampler::new(ds)?;
        let state = init_xavier(ds.num_users, ds.num_items, cfg.dim, cfg.seed);
        let adam = AdamState::new(&state, cfg.lr);
        Ok(Self {
            ds,
            adj,
            config_hash: cfg.hash(),
            cfg,
            sampler,
            best_state: state.clone(),
            state,
            adam,
            epoch: 0,
            early: EarlyStopState::default(),
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint written under the same configuration.
    pub fn resume(
        ds: &'a InteractionDataset,
        adj: &'a NormalizedAdjacency,
        cfg: TrainConfig,
        ckpt: Checkpoint,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(ds, adj, cfg)?;
        ckpt.check_config(&t.config_hash)?;
        if ckpt.state.user.shape() != t.state.user.shape()
            || ckpt.state.item.shape() != t.state.item.shape()
        {
            return Err(TrainError::ShapeMismatch);
        }
        t.epoch = ckpt.epoch;
        t.best_state = ckpt.best_state.unwrap_or_else(|| ckpt.state.clone());
        t.state = ckpt.state;
        t.adam = ckpt.adam;
        t.early = ckpt.early_stop.unwrap_or_default();
        t.history = ckpt.history;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta::new(self.config_hash.clone(), self.cfg.seed)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn state(&self) -> &EmbeddingState {
        &self.state
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn early_stop(&self) -> &EarlyStopState {
        &self.early
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.early.should_stop(self.cfg.patience)
    }

    /// Triples for `epoch` in batch order.
    pub fn epoch_triples(&self, epoch: usize) -> Vec<crate::dataset::TrainTriple> {
        let mut neg_rng = rng::stream_rng(self.cfg.seed, rng::STREAM_NEGATIVES, epoch as u64);
        let mut triples = self.sampler.triples(&self.ds.train, &mut neg_rng);
        let mut shuffle_rng = rng::stream_rng(self.cfg.seed, rng::STREAM_SHUFFLE, epoch as u64);
        triples.shuffle(&mut shuffle_rng);
        triples
    }

    /// Trains one epoch and validates.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let triples = self.epoch_triples(epoch);
        let loss_cfg = self.cfg.loss_config();
        let mut sum = LossReport::zero();
        for (batch, chunk) in triples.chunks(self.cfg.batch_size).enumerate() {
            let stack = propagate(&self.state, self.adj, self.cfg.layers)?;
            let (report, grads) = total_loss(&self.state, &stack, self.adj, chunk, &loss_cfg)
                .map_err(|source| match source {
                    LossError::NonFinite(_) => TrainError::NonFiniteLoss { epoch, batch },
                    source => TrainError::Loss {
                        epoch,
                        batch,
                        source,
                    },
                })?;
            if !report.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            adam_step(&mut self.state, &grads, &mut self.adam)
                .map_err(|source| TrainError::Optim {
                    epoch,
                    batch,
                    source,
                })?;
            sum.accumulate(&report);
        }
        let stack = propagate(&self.state, self.adj, self.cfg.layers)?;
        let val = evaluate(&stack, self.ds, Phase::Val, &[MONITOR_K])?;
        let ndcg = val.ndcg[0];
        if self.early.observe(epoch, ndcg) {
            self.best_state = self.state.clone();
        }
        self.epoch = epoch;
        let record = EpochRecord {
            epoch,
            loss: sum,
            val_ndcg10: ndcg,
            seconds: if self.cfg.record_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.history.push(record);
        Ok(record)
    }

    /// Runs epochs until early stopping or the epoch limit.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            config_text: self.cfg.canonical(),
            seed: self.cfg.seed,
            epoch: self.epoch,
            state: self.state.clone(),
            adam: self.adam.clone(),
            early_stop: Some(self.early),
            best_state: Some(self.best_state.clone()),
            history: self.history.clone(),
        }
    }

    /// Checkpoint of the best epoch's embeddings (optimizer state is the current one).
    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.early.best_epoch,
            state: self.best_state.clone(),
            best_state: None,
            ..self.checkpoint()
        }
    }

    pub fn finish(self) -> TrainedModel {
        TrainedModel {
            best_epoch: self.early.best_epoch,
            best_val_ndcg10: self.early.best_metric,
            epochs_run: self.epoch,
            best_state: self.best_state,
            history: self.history,
            config: self.cfg,
        }
    }
}

/// Trains from scratch to completion.
pub fn train(
    ds: &InteractionDataset,
    adj: &NormalizedAdjacency,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    let mut t = Trainer::new(ds, adj, cfg.clone())?;
    t.run()?;
    Ok(t.finish())
}
