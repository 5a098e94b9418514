//! Hyperparameter grids over `λ1 × τ` or `L × G`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use super::{train, TrainError};
use crate::artifact::ArtifactMeta;
use crate::config::TrainConfig;
use crate::dataset::InteractionDataset;
use crate::eval::MetricReport;
use crate::graph::NormalizedAdjacency;

#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    LambdaTau { lambda1: Vec<f64>, tau: Vec<f64> },
    LayersGroups { layers: Vec<usize>, groups: Vec<usize> },
}

fn parse_axis<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| format!("bad grid value {x:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.is_empty() {
        return Err("empty grid axis".into());
    }
    Ok(v)
}

impl FromStr for Grid {
    type Err = String;

    /// `lambda1=1e-6,1e-5;tau=0.1,0.2` or `layers=1,2,3;groups=1,2`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut axes = std::collections::BTreeMap::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("grid axis {part:?} is not key=values"))?;
            if axes.insert(k.trim().to_string(), v.to_string()).is_some() {
                return Err(format!("grid axis {k:?} given twice"));
            }
        }
        let keys: Vec<&str> = axes.keys().map(String::as_str).collect();
        match keys.as_slice() {
            ["lambda1", "tau"] => Ok(Grid::LambdaTau {
                lambda1: parse_axis(&axes["lambda1"])?,
                tau: parse_axis(&axes["tau"])?,
            }),
            ["groups", "layers"] => Ok(Grid::LayersGroups {
                layers: parse_axis(&axes["layers"])?,
                groups: parse_axis(&axes["groups"])?,
            }),
            _ => Err("grid must be lambda1 x tau or layers x groups".into()),
        }
    }
}

impl Grid {
    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            Grid::LambdaTau { .. } => ("lambda1", "tau"),
            Grid::LayersGroups { .. } => ("layers", "groups"),
        }
    }

    /// Every cell in row-major order as `(labels, config)`.
    pub fn cells(&self, base: &TrainConfig) -> Vec<((String, String), TrainConfig)> {
        let mut out = Vec::new();
        match self {
            Grid::LambdaTau { lambda1, tau } => {
                for &a in lambda1 {
                    for &b in tau {
                        let cfg = TrainConfig {
                            lambda1: a,
                            tau: b,
                            ..base.clone()
                        };
                        out.push(((format!("{a:?}"), format!("{b:?}")), cfg));
                    }
                }
            }
            Grid::LayersGroups { layers, groups } => {
                for &a in layers {
                    for &b in groups {
                        let cfg = TrainConfig {
                            layers: a,
                            groups: b,
                            ..base.clone()
                        };
                        out.push(((a.to_string(), b.to_string()), cfg));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub labels: (String, String),
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    pub test: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCell {
    pub labels: (String, String),
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axes: (&'static str, &'static str),
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SkippedCell>,
}

/// Trains each valid cell in turn. Every cell reuses the base seed, so cells
/// differ only in the swept hyperparameters.
pub fn grid_sweep(
    ds: &InteractionDataset,
    adj: &NormalizedAdjacency,
    base: &TrainConfig,
    grid: &Grid,
) -> Result<SweepResult, TrainError> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (labels, cfg) in grid.cells(base) {
        if let Err(e) = cfg.validate() {
            skipped.push(SkippedCell {
                labels,
                reason: e.to_string(),
            });
            continue;
        }
        let model = train(ds, adj, &cfg)?;
        let test = model.test_report(ds, adj)?;
        rows.push(SweepRow {
            labels,
            config_hash: cfg.hash(),
            best_epoch: model.best_epoch,
            best_val_ndcg10: model.best_val_ndcg10,
            test,
        });
    }
    Ok(SweepResult {
        axes: grid.axis_names(),
        ks: base.eval_ks.clone(),
        rows,
        skipped,
    })
}

impl SweepResult {
    pub fn to_csv(&self, meta: &ArtifactMeta) -> String {
        let mut s = format!("{meta}\n");
        for c in &self.skipped {
            let _ = writeln!(
                s,
                "# skipped {}={} {}={}: {}",
                self.axes.0, c.labels.0, self.axes.1, c.labels.1, c.reason
            );
        }
        let _ = write!(s, "{},{},val_ndcg@10", self.axes.0, self.axes.1);
        for k in &self.ks {
            let _ = write!(s, ",test_recall@{k}");
        }
        for k in &self.ks {
            let _ = write!(s, ",test_ndcg@{k}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{:?}", r.labels.0, r.labels.1, r.best_val_ndcg10);
            for v in r.test.recall.iter().chain(&r.test.ndcg) {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, meta: &ArtifactMeta) -> io::Result<()> {
        fs::write(path, self.to_csv(meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_grids() {
        let g: Grid = "lambda1=1e-6,1e-5;tau=0.1,0.2,0.3".parse().unwrap();
        assert_eq!(g.cells(&TrainConfig::default()).len(), 6);
        let g: Grid = "groups=1,2; layers=1,2,3".parse().unwrap();
        let cells = g.cells(&TrainConfig::default());
        assert_eq!(cells[0].0, ("1".to_string(), "1".to_string()));
        assert_eq!(cells.len(), 6);
        assert!("tau=0.1".parse::<Grid>().is_err());
        assert!("lambda1=x;tau=0.1".parse::<Grid>().is_err());
        assert!("layers=1;tau=0.1".parse::<Grid>().is_err());
    }

    #[test]
    fn invalid_cells_counted() {
        let g: Grid = "layers=1,2;groups=1,2".parse().unwrap();
        let invalid = g
            .cells(&TrainConfig::default())
            .into_iter()
            .filter(|(_, c)| c.validate().is_err())
            .count();
        assert_eq!(invalid, 1);
    }
}
