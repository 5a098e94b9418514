//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected so a
//! misspelled hyperparameter cannot silently fall back to its default.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `data_dir` | required | split directory written by `prepare` |
//! | `out_dir` | `out` | output directory |
//! | `seed` | `2024` | master seed |
//! | `batch_size` | `4096` | triples per step |
//! | `dim` | `64` | embedding size |
//! | `layers` | `2` | propagation depth `L` |
//! | `groups` | `1` | contrastive layer pairs `G` (`1 ≤ G ≤ L`) |
//! | `scope` | `hetero` | `hetero` or `entire` |
//! | `denominator` | `full` | `full` or `in_batch` |
//! | `anchors` | `batch` | `batch` or `all` |
//! | `normalize` | `false` | cosine instead of dot-product similarity |
//! | `tau` | `0.2` | temperature |
//! | `lambda1` | `1e-5` | contrastive weight |
//! | `lambda2` | `1e-4` | L2 weight |
//! | `lr` | `1e-3` | Adam learning rate |
//! | `max_epochs` | `1000` | hard epoch limit |
//! | `patience` | `20` | epochs without validation NDCG@10 improvement before stopping |
//! | `eval_ks` | `10,20,50` | ascending cutoffs for test metrics |
//! | `record_wall_clock` | `true` | write elapsed seconds into the history (else `0`) |
//! | `raw_path` | required by `prepare` | raw `user<TAB>item` file |
//! | `k_user`, `k_item` | `5`, `5` | k-core thresholds |
//! | `split` | `0.8,0.1,0.1` | train/val/test fractions per user |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::{AnchorMode, Denominator, LossConfig, Scope};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {message}")]
    InvalidValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Constraint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub groups: usize,
    pub scope: Scope,
    pub denominator: Denominator,
    pub anchors: AnchorMode,
    pub normalize: bool,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            batch_size: 4096,
            dim: 64,
            layers: 2,
            groups: 1,
            scope: Scope::Heterogeneous,
            denominator: Denominator::Full,
            anchors: AnchorMode::Batch,
            normalize: false,
            tau: 0.2,
            lambda1: 1e-5,
            lambda2: 1e-4,
            lr: 1e-3,
            max_epochs: 1000,
            patience: 20,
            eval_ks: vec![10, 20, 50],
            record_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            groups: self.groups,
            scope: self.scope,
            denominator: self.denominator,
            anchors: self.anchors,
            normalize: self.normalize,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Constraint(m));
        if self.batch_size == 0 || self.dim == 0 || self.layers == 0 {
            return fail("batch_size, dim and layers must be at least 1".into());
        }
        if self.groups == 0 || self.groups > self.layers {
            return fail(format!(
                "groups must satisfy 1 <= G <= L (G={}, L={})",
                self.groups, self.layers
            ));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.eval_ks.is_empty()
            || self.eval_ks[0] == 0
            || self.eval_ks.windows(2).any(|w| w[0] >= w[1])
        {
            return fail("eval_ks must be non-empty, positive and strictly ascending".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be > 0".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lr >= 0.0) {
            return fail("lambda1, lambda2 and lr must be >= 0".into());
        }
        Ok(())
    }

    /// Canonical `key = value` lines, sorted by key. Floats use round-trip formatting.
    pub fn canonical(&self) -> String {
        let ks: Vec<String> = self.eval_ks.iter().map(|k| k.to_string()).collect();
        let entries: BTreeMap<&str, String> = BTreeMap::from([
            ("anchors", self.anchors.as_str().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("denominator", self.denominator.as_str().to_string()),
            ("dim", self.dim.to_string()),
            ("eval_ks", ks.join(",")),
            ("groups", self.groups.to_string()),
            ("lambda1", format!("{:?}", self.lambda1)),
            ("lambda2", format!("{:?}", self.lambda2)),
            ("layers", self.layers.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("max_epochs", self.max_epochs.to_string()),
            ("normalize", self.normalize.to_string()),
            ("patience", self.patience.to_string()),
            ("record_wall_clock", self.record_wall_clock.to_string()),
            ("scope", self.scope.as_str().to_string()),
            ("seed", self.seed.to_string()),
            ("tau", format!("{:?}", self.tau)),
        ]);
        entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of SHA-256 over [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything a command may read from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub raw_path: Option<PathBuf>,
    pub k_user: usize,
    pub k_item: usize,
    pub split: (f64, f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
            raw_path: None,
            k_user: 5,
            k_item: 5,
            split: (0.8, 0.1, 0.1),
        }
    }
}

fn invalid(key: &str, value: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| invalid(key, value, e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

impl RunConfig {
    /// Hash of the settings that determine a prepared split: source, k-core
    /// thresholds, ratios and seed.
    pub fn prepare_hash(&self) -> String {
        let text = format!(
            "raw_path = {}\nk_user = {}\nk_item = {}\nsplit = {:?},{:?},{:?}\nseed = {}\n",
            self.raw_path.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.k_user,
            self.k_item,
            self.split.0,
            self.split.1,
            self.split.2,
            self.train.seed
        );
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                line: n + 1,
                message: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line: n + 1,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: n + 1, key },
                other => other,
            })?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "raw_path" => self.raw_path = Some(PathBuf::from(value)),
            "k_user" => self.k_user = parse_num(key, value)?,
            "k_item" => self.k_item = parse_num(key, value)?,
            "split" => {
                let r: Vec<f64> = parse_list(key, value)?;
                if r.len() != 3 {
                    return Err(invalid(key, value, "expected three ratios"));
                }
                self.split = (r[0], r[1], r[2]);
            }
            "seed" => t.seed = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "dim" => t.dim = parse_num(key, value)?,
            "layers" => t.layers = parse_num(key, value)?,
            "groups" => t.groups = parse_num(key, value)?,
            "scope" => t.scope = value.parse().map_err(|m: String| invalid(key, value, m))?,
            "denominator" => {
                t.denominator = value.parse().map_err(|m: String| invalid(key, value, m))?
            }
            "anchors" => t.anchors = value.parse().map_err(|m: String| invalid(key, value, m))?,
            "normalize" => t.normalize = parse_bool(key, value)?,
            "tau" => t.tau = parse_num(key, value)?,
            "lambda1" => t.lambda1 = parse_num(key, value)?,
            "lambda2" => t.lambda2 = parse_num(key, value)?,
            "lr" => t.lr = parse_num(key, value)?,
            "max_epochs" => t.max_epochs = parse_num(key, value)?,
            "patience" => t.patience = parse_num(key, value)?,
            "eval_ks" => t.eval_ks = parse_list(key, value)?,
            "record_wall_clock" => t.record_wall_clock = parse_bool(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.dim, 64);
        assert_eq!(c.batch_size, 4096);
        assert_eq!(c.lambda2, 1e-4);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.patience, 20);
        assert_eq!(c.eval_ks, vec![10, 20, 50]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parse_full_file() {
        let text = "\
# comment
data_dir = data/split
scope = entire   # trailing comment
denominator = in_batch
tau = 0.3
eval_ks = 5, 10
layers = 3
groups = 2
split = 0.7,0.15,0.15
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.data_dir, Some(PathBuf::from("data/split")));
        assert_eq!(c.train.scope, Scope::Entire);
        assert_eq!(c.train.denominator, Denominator::InBatch);
        assert_eq!(c.train.tau, 0.3);
        assert_eq!(c.train.eval_ks, vec![5, 10]);
        assert_eq!(c.split, (0.7, 0.15, 0.15));
    }

    #[test]
    fn unknown_and_bad_keys() {
        assert_eq!(
            RunConfig::parse("lamda1 = 1e-5\n"),
            Err(ConfigError::UnknownKey { line: 1, key: "lamda1".into() })
        );
        assert!(matches!(RunConfig::parse("tau = abc"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(RunConfig::parse("scope = both"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(RunConfig::parse("tau"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            RunConfig::parse("tau = 0.1\ntau = 0.2"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("layers = 1\ngroups = 2"),
            Err(ConfigError::Constraint(_))
        ));
        assert!(matches!(RunConfig::parse("eval_ks = 20,10"), Err(ConfigError::Constraint(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_eq!(a.hash().len(), 16);
        let b = TrainConfig { tau: 0.3, ..TrainConfig::default() };
        assert_ne!(a.hash(), b.hash());
    }
}
