//! Binary checkpoints.
//!
//! Layout: the 8 magic bytes `NLGCKPT1`, a little-endian `u32` format version,
//! then tagged sections `[tag: 4 bytes][len: u64][payload]` ending with `END\0`.
//! Every float is a little-endian IEEE-754 `f64`, so a round trip is bit-exact.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{EarlyStopState, EpochRecord};
use crate::linalg::Matrix;
use crate::loss::LossReport;
use crate::model::EmbeddingState;
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"NLGCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was written with config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub state: EmbeddingState,
    pub adam: AdamState,
    pub early_stop: Option<EarlyStopState>,
    pub best_state: Option<EmbeddingState>,
    pub history: Vec<EpochRecord>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for v in m.as_slice() {
            self.f64(*v);
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: impl FnOnce(&mut Writer)) {
        let mut inner = Writer { buf: Vec::new() };
        body(&mut inner);
        self.buf.extend_from_slice(tag);
        self.u64(inner.buf.len() as u64);
        self.buf.extend_from_slice(&inner.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("invalid utf-8".into()))
    }
    fn matrix(&mut self) -> Result<Matrix, CheckpointError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| CheckpointError::Corrupt("matrix larger than file".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_vec(rows, cols, data))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.section(b"META", |w| {
            w.str(&self.config_hash);
            w.u64(self.seed);
            w.u64(self.epoch as u64);
            w.str(&self.config_text);
        });
        w.section(b"EMBD", |w| {
            w.matrix(&self.state.user);
            w.matrix(&self.state.item);
        });
        w.section(b"ADAM", |w| {
            let a = &self.adam;
            w.u64(a.step_count);
            w.f64(a.lr);
            w.f64(a.beta1);
            w.f64(a.beta2);
            w.f64(a.eps);
            w.matrix(&a.m_user);
            w.matrix(&a.v_user);
            w.matrix(&a.m_item);
            w.matrix(&a.v_item);
        });
        if let Some(es) = &self.early_stop {
            w.section(b"STOP", |w| {
                w.f64(es.best_metric);
                w.u64(es.best_epoch as u64);
                w.u64(es.epochs_since_improve as u64);
            });
        }
        if let Some(best) = &self.best_state {
            w.section(b"BEST", |w| {
                w.matrix(&best.user);
                w.matrix(&best.item);
            });
        }
        w.section(b"HIST", |w| {
            w.u64(self.history.len() as u64);
            for r in &self.history {
                w.u64(r.epoch as u64);
                for v in [
                    r.loss.bpr,
                    r.loss.nl_user,
                    r.loss.nl_item,
                    r.loss.reg,
                    r.loss.total,
                    r.val_ndcg10,
                    r.seconds,
                ] {
                    w.f64(v);
                }
            }
        });
        w.section(b"END\0", |_| {});
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut meta = None;
        let mut state = None;
        let mut adam = None;
        let mut early_stop = None;
        let mut best_state = None;
        let mut history = None;
        let mut ended = false;
        while !ended {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.usize()?;
            let mut s = Reader {
                buf: r.take(len)?,
                pos: 0,
            };
            match &tag {
                b"META" => {
                    let hash = s.str()?;
                    let seed = s.u64()?;
                    let epoch = s.usize()?;
                    let text = s.str()?;
                    meta = Some((hash, seed, epoch, text));
                }
                b"EMBD" => {
                    let user = s.matrix()?;
                    let item = s.matrix()?;
                    state = Some(EmbeddingState { user, item });
                }
                b"ADAM" => {
                    let step_count = s.u64()?;
                    let lr = s.f64()?;
                    let beta1 = s.f64()?;
                    let beta2 = s.f64()?;
                    let eps = s.f64()?;
                    adam = Some(AdamState {
                        step_count,
                        lr,
                        beta1,
                        beta2,
                        eps,
                        m_user: s.matrix()?,
                        v_user: s.matrix()?,
                        m_item: s.matrix()?,
                        v_item: s.matrix()?,
                    });
                }
                b"STOP" => {
                    early_stop = Some(EarlyStopState {
                        best_metric: s.f64()?,
                        best_epoch: s.usize()?,
                        epochs_since_improve: s.usize()?,
                    });
                }
                b"BEST" => {
                    let user = s.matrix()?;
                    let item = s.matrix()?;
                    best_state = Some(EmbeddingState { user, item });
                }
                b"HIST" => {
                    let n = s.usize()?;
                    let mut h = Vec::with_capacity(n.min(1 << 20));
                    for _ in 0..n {
                        let epoch = s.usize()?;
                        let mut v = [0.0; 7];
                        for x in &mut v {
                            *x = s.f64()?;
                        }
                        h.push(EpochRecord {
                            epoch,
                            loss: LossReport {
                                bpr: v[0],
                                nl_user: v[1],
                                nl_item: v[2],
                                reg: v[3],
                                total: v[4],
                            },
                            val_ndcg10: v[5],
                            seconds: v[6],
                        });
                    }
                    history = Some(h);
                }
                b"END\0" => ended = true,
                other => {
                    return Err(CheckpointError::Corrupt(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
            if !s.done() {
                return Err(CheckpointError::Corrupt(format!(
                    "section {:?} has trailing bytes",
                    String::from_utf8_lossy(&tag)
                )));
            }
        }
        if !r.done() {
            return Err(CheckpointError::Corrupt("data after end marker".into()));
        }
        let missing = |what: &str| CheckpointError::Corrupt(format!("missing {what} section"));
        let (config_hash, seed, epoch, config_text) = meta.ok_or_else(|| missing("META"))?;
        let state = state.ok_or_else(|| missing("EMBD"))?;
        let adam = adam.ok_or_else(|| missing("ADAM"))?;
        if adam.m_user.shape() != state.user.shape() || adam.m_item.shape() != state.item.shape() {
            return Err(CheckpointError::Corrupt("optimizer shape mismatch".into()));
        }
        Ok(Self {
            config_hash,
            config_text,
            seed,
            epoch,
            state,
            adam,
            early_stop,
            best_state,
            history: history.unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Errors unless the checkpoint was produced under `expected_hash`.
    pub fn check_config(&self, expected_hash: &str) -> Result<(), CheckpointError> {
        if self.config_hash != expected_hash {
            return Err(CheckpointError::ConfigMismatch {
                expected: expected_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}
