//! Base embeddings, LightGCN propagation, mean readout and scoring.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::artifact::ArtifactMeta;
use crate::graph::{spmm_items_to_users, spmm_users_to_items, GraphError, NormalizedAdjacency};
use crate::linalg::{dot, Matrix};
use crate::par::*;
use crate::rng;

/// Trainable parameters: one row per user and per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub user: Matrix,
    pub item: Matrix,
}

impl EmbeddingState {
    pub fn zeros(num_users: usize, num_items: usize, d: usize) -> Self {
        Self {
            user: Matrix::zeros(num_users, d),
            item: Matrix::zeros(num_items, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item.rows()
    }

    pub fn all_finite(&self) -> bool {
        self.user.all_finite() && self.item.all_finite()
    }
}

fn xavier_matrix(rows: usize, d: usize, seed: u64, index: u64) -> Matrix {
    let std = (2.0 / (rows + d) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut rng = rng::stream_rng(seed, rng::STREAM_INIT, index);
    let data = (0..rows * d).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(rows, d, data)
}

/// Xavier-normal initialization per matrix, with fans `(rows, d)`.
pub fn init_xavier(num_users: usize, num_items: usize, d: usize, seed: u64) -> EmbeddingState {
    assert!(d >= 1, "embedding dimension must be at least 1");
    EmbeddingState {
        user: xavier_matrix(num_users, d, seed, 0),
        item: xavier_matrix(num_items, d, seed, 1),
    }
}

/// Per-layer embeddings `0..=L` and their uniform mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub user_layers: Vec<Matrix>,
    pub item_layers: Vec<Matrix>,
    pub readout_user: Matrix,
    pub readout_item: Matrix,
}

impl LayerStack {
    /// Number of propagation layers `L` (the stack holds `L + 1` matrices per side).
    pub fn num_layers(&self) -> usize {
        self.user_layers.len() - 1
    }

    pub fn num_users(&self) -> usize {
        self.readout_user.rows()
    }

    pub fn num_items(&self) -> usize {
        self.readout_item.rows()
    }

    pub fn dim(&self) -> usize {
        self.readout_user.cols()
    }

    /// Builds a stack from explicit layers and recomputes the readouts.
    pub fn from_layers(user_layers: Vec<Matrix>, item_layers: Vec<Matrix>) -> Self {
        assert!(!user_layers.is_empty() && user_layers.len() == item_layers.len());
        let readout_user = mean_of(&user_layers);
        let readout_item = mean_of(&item_layers);
        Self {
            user_layers,
            item_layers,
            readout_user,
            readout_item,
        }
    }
}

fn mean_of(layers: &[Matrix]) -> Matrix {
    let mut out = Matrix::zeros(layers[0].rows(), layers[0].cols());
    let w = 1.0 / layers.len() as f64;
    for layer in layers {
        out.axpy(w, layer);
    }
    out
}

/// Runs `num_layers` LightGCN steps from the base embeddings.
pub fn propagate(
    state: &EmbeddingState,
    adj: &NormalizedAdjacency,
    num_layers: usize,
) -> Result<LayerStack, GraphError> {
    assert!(num_layers >= 1, "propagation needs at least one layer");
    for (expected, got) in [
        (adj.num_users(), state.num_users()),
        (adj.num_items(), state.num_items()),
    ] {
        if expected != got {
            return Err(GraphError::DimensionMismatch { expected, got });
        }
    }
    let mut user_layers = Vec::with_capacity(num_layers + 1);
    let mut item_layers = Vec::with_capacity(num_layers + 1);
    user_layers.push(state.user.clone());
    item_layers.push(state.item.clone());
    for l in 1..=num_layers {
        let u = spmm_items_to_users(adj, &item_layers[l - 1])?;
        let i = spmm_users_to_items(adj, &user_layers[l - 1])?;
        user_layers.push(u);
        item_layers.push(i);
    }
    Ok(LayerStack::from_layers(user_layers, item_layers))
}

/// Predicted preference `ē_u · ē_i`.
pub fn score(stack: &LayerStack, u: usize, i: usize) -> f64 {
    dot(stack.readout_user.row(u), stack.readout_item.row(i))
}

/// Scores of `u` against every item.
pub fn score_all(stack: &LayerStack, u: usize) -> Vec<f64> {
    let eu = stack.readout_user.row(u);
    (0..stack.num_items())
        .into_par_iter()
        .map(|i| dot(eu, stack.readout_item.row(i)))
        .collect()
}

/// Writes readout embeddings as `kind<TAB>index<TAB>v0..v{d-1}`, users then items.
pub fn export_embeddings(
    path: impl AsRef<Path>,
    stack: &LayerStack,
    meta: &ArtifactMeta,
) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{meta}")?;
    for (kind, m) in [("user", &stack.readout_user), ("item", &stack.readout_item)] {
        for r in 0..m.rows() {
            write!(w, "{kind}\t{r}")?;
            for v in m.row(r) {
                // `{:?}` prints the shortest string that parses back to the same f64.
                write!(w, "\t{v:?}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()
}

/// Parses an export written by [`export_embeddings`] into `(users, items)`.
pub fn read_embeddings(path: impl AsRef<Path>) -> io::Result<(Matrix, Matrix)> {
    let text = fs::read_to_string(path)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut users: Vec<Vec<f64>> = Vec::new();
    let mut items: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let mut f = line.split('\t');
        let kind = f.next().ok_or_else(|| bad("missing kind"))?;
        let _index = f.next().ok_or_else(|| bad("missing index"))?;
        let values = f
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>, _>>()?;
        match kind {
            "user" => users.push(values),
            "item" => items.push(values),
            _ => return Err(bad("unknown kind")),
        }
    }
    let to_matrix = |rows: Vec<Vec<f64>>| -> io::Result<Matrix> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(bad("ragged rows"));
        }
        let n = rows.len();
        Ok(Matrix::from_vec(n, d, rows.into_iter().flatten().collect()))
    };
    Ok((to_matrix(users)?, to_matrix(items)?))
}
