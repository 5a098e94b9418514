//! Interaction logs: loading, k-core filtering, per-user splitting and
//! pair-wise training triples.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::artifact::ArtifactMeta;
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset is empty after {k_user}/{k_item}-core filtering")]
    EmptyAfterFiltering { k_user: usize, k_item: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("user {user} has interacted with all {num_items} items; no negative to sample")]
    NoNegative { user: usize, num_items: usize },
}

impl DataError {
    fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// De-duplicated `(user_token, item_token)` records in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteractions {
    pub records: Vec<(String, String)>,
    pub source_path: PathBuf,
}

impl RawInteractions {
    /// Builds from in-memory pairs, collapsing duplicates.
    pub fn from_pairs<U, I>(pairs: impl IntoIterator<Item = (U, I)>) -> Self
    where
        U: Into<String>,
        I: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (u, i) in pairs {
            let rec = (u.into(), i.into());
            if seen.insert(rec.clone()) {
                records.push(rec);
            }
        }
        Self {
            records,
            source_path: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Reads a `user<TAB>item[<TAB>...]` file. Empty lines are skipped; extra columns are ignored.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<RawInteractions, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let user = fields.next().unwrap_or_default();
        let item = match fields.next() {
            Some(item) if !user.is_empty() && !item.is_empty() => item,
            _ => {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected at least two non-empty tab-separated fields".into(),
                })
            }
        };
        let rec = (user.to_string(), item.to_string());
        if seen.insert(rec.clone()) {
            records.push(rec);
        }
    }
    Ok(RawInteractions {
        records,
        source_path: path.to_path_buf(),
    })
}

/// Keeps the maximal sub-dataset where every user has at least `k_user` and every
/// item at least `k_item` interactions. Record order is preserved.
pub fn k_core_filter(
    raw: &RawInteractions,
    k_user: usize,
    k_item: usize,
) -> Result<RawInteractions, DataError> {
    if k_user == 0 || k_item == 0 {
        return Err(DataError::InvalidArgument(
            "k-core thresholds must be at least 1".into(),
        ));
    }
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut edges = Vec::with_capacity(raw.records.len());
    for (u, i) in &raw.records {
        let nu = user_ids.len();
        let ni = item_ids.len();
        let u = *user_ids.entry(u.as_str()).or_insert(nu);
        let i = *item_ids.entry(i.as_str()).or_insert(ni);
        edges.push((u, i));
    }
    let num_users = user_ids.len();
    let num_items = item_ids.len();
    let mut user_edges = vec![Vec::new(); num_users];
    let mut item_edges = vec![Vec::new(); num_items];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    let mut user_deg: Vec<usize> = user_edges.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_edges.iter().map(Vec::len).collect();
    let mut edge_alive = vec![true; edges.len()];
    let mut user_alive = vec![true; num_users];
    let mut item_alive = vec![true; num_items];

    // Node ids: users are 0..num_users, items are offset by num_users.
    let mut queue: VecDeque<usize> = (0..num_users)
        .filter(|&u| user_deg[u] < k_user)
        .chain((0..num_items).filter(|&i| item_deg[i] < k_item).map(|i| i + num_users))
        .collect();

    while let Some(node) = queue.pop_front() {
        if node < num_users {
            let u = node;
            if !user_alive[u] {
                continue;
            }
            user_alive[u] = false;
            for &e in &user_edges[u] {
                if !edge_alive[e] {
                    continue;
                }
                edge_alive[e] = false;
                let i = edges[e].1;
                item_deg[i] -= 1;
                if item_alive[i] && item_deg[i] + 1 == k_item {
                    queue.push_back(i + num_users);
                }
            }
        } else {
            let i = node - num_users;
            if !item_alive[i] {
                continue;
            }
            item_alive[i] = false;
            for &e in &item_edges[i] {
                if !edge_alive[e] {
                    continue;
                }
                edge_alive[e] = false;
                let u = edges[e].0;
                user_deg[u] -= 1;
                if user_alive[u] && user_deg[u] + 1 == k_user {
                    queue.push_back(u);
                }
            }
        }
    }

    let records: Vec<(String, String)> = raw
        .records
        .iter()
        .zip(&edge_alive)
        .filter(|(_, &alive)| alive)
        .map(|(r, _)| r.clone())
        .collect();
    if records.is_empty() {
        return Err(DataError::EmptyAfterFiltering { k_user, k_item });
    }
    Ok(RawInteractions {
        records,
        source_path: raw.source_path.clone(),
    })
}

/// Token ↔ index maps; indices follow lexicographic token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
}

impl IdMap {
    pub fn from_raw(raw: &RawInteractions) -> Self {
        let mut users: Vec<String> = raw.records.iter().map(|(u, _)| u.clone()).collect();
        let mut items: Vec<String> = raw.records.iter().map(|(_, i)| i.clone()).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        Self {
            user_tokens: users,
            item_tokens: items,
        }
    }

    pub fn user_index(&self, token: &str) -> Option<usize> {
        self.user_tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
    }

    pub fn item_index(&self, token: &str) -> Option<usize> {
        self.item_tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
    }

    pub fn num_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_tokens.len()
    }
}

pub type Edge = (usize, usize);

/// Remapped interactions partitioned into train / validation / test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Edge>,
    pub val: Vec<Edge>,
    pub test: Vec<Edge>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl InteractionDataset {
    pub fn edges(&self, split: Split) -> &[Edge] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Per-user sorted item lists for one split.
    pub fn user_items(&self, split: Split) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_users];
        for &(u, i) in self.edges(split) {
            lists[u].push(i);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Split-size rule: val and test get `floor(n * ratio)`, train keeps the rest (at least one).
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    if n == 0 {
        return (0, 0, 0);
    }
    // The small slack keeps products like 10 * 0.1 from landing just under an integer.
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let mut val = floor(ratios.1);
    let mut test = floor(ratios.2);
    while val + test >= n {
        if test > 0 {
            test -= 1;
        } else {
            val -= 1;
        }
    }
    (n - val - test, val, test)
}

/// Per-user random split. Each user's items are shuffled with a stream derived
/// from `(seed, user index)`; edges inside each split are sorted by `(user, item)`.
pub fn split_per_user(
    raw: &RawInteractions,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(InteractionDataset, IdMap), DataError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let idmap = IdMap::from_raw(raw);
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); idmap.num_users()];
    for (u, i) in &raw.records {
        let u = idmap.user_index(u).expect("token present in idmap");
        let i = idmap.item_index(i).expect("token present in idmap");
        per_user[u].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        let mut rng = rng::stream_rng(seed, rng::STREAM_SPLIT, u as u64);
        items.shuffle(&mut rng);
        let (n_train, n_val, _) = split_counts(items.len(), ratios);
        for (k, &i) in items.iter().enumerate() {
            if k < n_train {
                train.push((u, i));
            } else if k < n_train + n_val {
                val.push((u, i));
            } else {
                test.push((u, i));
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((
        InteractionDataset {
            num_users: idmap.num_users(),
            num_items: idmap.num_items(),
            train,
            val,
            test,
            seed,
        },
        idmap,
    ))
}

/// `(user, positive, negative)` with `(u, p)` in train and `(u, n)` not in train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainTriple {
    pub u: usize,
    pub p: usize,
    pub n: usize,
}

/// Uniform negative sampler over items outside a user's training set.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    num_items: usize,
    train_items: Vec<Vec<usize>>,
}

impl NegativeSampler {
    pub fn new(ds: &InteractionDataset) -> Result<Self, DataError> {
        let train_items = ds.user_items(Split::Train);
        if let Some(user) = train_items.iter().position(|l| l.len() >= ds.num_items) {
            return Err(DataError::NoNegative {
                user,
                num_items: ds.num_items,
            });
        }
        Ok(Self {
            num_items: ds.num_items,
            train_items,
        })
    }

    pub fn is_positive(&self, u: usize, i: usize) -> bool {
        self.train_items[u].binary_search(&i).is_ok()
    }

    /// Rejection-samples one negative for `u`.
    pub fn sample(&self, u: usize, rng: &mut Rng) -> usize {
        loop {
            let n = rng.random_range(0..self.num_items);
            if !self.is_positive(u, n) {
                return n;
            }
        }
    }

    /// One triple per train edge, in edge order.
    pub fn triples(&self, train: &[Edge], rng: &mut Rng) -> Vec<TrainTriple> {
        train
            .iter()
            .map(|&(u, p)| TrainTriple {
                u,
                p,
                n: self.sample(u, rng),
            })
            .collect()
    }
}

/// Exactly one triple per training interaction with a uniformly drawn negative.
pub fn sample_triples(
    ds: &InteractionDataset,
    rng: &mut Rng,
) -> Result<Vec<TrainTriple>, DataError> {
    let sampler = NegativeSampler::new(ds)?;
    Ok(sampler.triples(&ds.train, rng))
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VAL_FILE: &str = "val.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const IDMAP_FILE: &str = "idmap.tsv";

fn write_lines(
    path: &Path,
    meta: &ArtifactMeta,
    body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{meta}")
        .and_then(|_| body(&mut w))
        .and_then(|_| w.flush())
        .map_err(|e| DataError::io(path, e))
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv` and `idmap.tsv` into `dir`.
pub fn write_split(
    dir: impl AsRef<Path>,
    ds: &InteractionDataset,
    idmap: &IdMap,
    meta: &ArtifactMeta,
) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for (name, edges) in [
        (TRAIN_FILE, &ds.train),
        (VAL_FILE, &ds.val),
        (TEST_FILE, &ds.test),
    ] {
        write_lines(&dir.join(name), meta, |w| {
            for (u, i) in edges {
                writeln!(w, "{u}\t{i}")?;
            }
            Ok(())
        })?;
    }
    write_lines(&dir.join(IDMAP_FILE), meta, |w| {
        for (idx, tok) in idmap.user_tokens.iter().enumerate() {
            writeln!(w, "user\t{tok}\t{idx}")?;
        }
        for (idx, tok) in idmap.item_tokens.iter().enumerate() {
            writeln!(w, "item\t{tok}\t{idx}")?;
        }
        Ok(())
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Header (if any) and the numbered non-comment lines.
type DataLines = (Option<ArtifactMeta>, Vec<(usize, String)>);

fn read_data_lines(path: &Path) -> Result<DataLines, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut meta = None;
    let mut lines = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            if meta.is_none() {
                meta = ArtifactMeta::parse_header(line);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        lines.push((n + 1, line.to_string()));
    }
    Ok((meta, lines))
}

fn read_edges(path: &Path, num_users: usize, num_items: usize) -> Result<Vec<Edge>, DataError> {
    let (_, lines) = read_data_lines(path)?;
    lines
        .into_iter()
        .map(|(n, line)| {
            let mut f = line.split('\t');
            let u: usize = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(path, n, "bad user index"))?;
            let i: usize = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(path, n, "bad item index"))?;
            if u >= num_users || i >= num_items {
                return Err(parse_err(path, n, "index out of range"));
            }
            Ok((u, i))
        })
        .collect()
}

/// Reads a split directory written by [`write_split`].
pub fn read_split(dir: impl AsRef<Path>) -> Result<(InteractionDataset, IdMap), DataError> {
    let dir = dir.as_ref();
    let idmap_path = dir.join(IDMAP_FILE);
    let (meta, lines) = read_data_lines(&idmap_path)?;
    let mut users: Vec<(usize, String)> = Vec::new();
    let mut items: Vec<(usize, String)> = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(&idmap_path, n, "expected kind<TAB>token<TAB>index"));
        }
        let idx: usize = f[2]
            .parse()
            .map_err(|_| parse_err(&idmap_path, n, "bad index"))?;
        match f[0] {
            "user" => users.push((idx, f[1].to_string())),
            "item" => items.push((idx, f[1].to_string())),
            other => return Err(parse_err(&idmap_path, n, format!("unknown kind {other:?}"))),
        }
    }
    let finish = |mut v: Vec<(usize, String)>, kind: &str| -> Result<Vec<String>, DataError> {
        v.sort_unstable();
        if v.iter().enumerate().any(|(k, (idx, _))| *idx != k) {
            return Err(parse_err(
                &idmap_path,
                0,
                format!("{kind} indices are not a contiguous 0..n range"),
            ));
        }
        Ok(v.into_iter().map(|(_, t)| t).collect())
    };
    let idmap = IdMap {
        user_tokens: finish(users, "user")?,
        item_tokens: finish(items, "item")?,
    };
    let (nu, ni) = (idmap.num_users(), idmap.num_items());
    let ds = InteractionDataset {
        num_users: nu,
        num_items: ni,
        train: read_edges(&dir.join(TRAIN_FILE), nu, ni)?,
        val: read_edges(&dir.join(VAL_FILE), nu, ni)?,
        test: read_edges(&dir.join(TEST_FILE), nu, ni)?,
        seed: meta.map(|m| m.seed).unwrap_or_default(),
    };
    Ok((ds, idmap))
}
