//! `nlgcl` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlgcl_core::analysis::{
    decay_curves, eigendecompose, estimate_complexity, write_curves_csv, write_spectrum_csv,
    CostInputs, DEFAULT_NODE_CAP,
};
use nlgcl_core::artifact::ArtifactMeta;
use nlgcl_core::config::{ConfigError, RunConfig};
use nlgcl_core::dataset::{k_core_filter, load_interactions, read_split, split_per_user, write_split, DataError, InteractionDataset};
use nlgcl_core::eval::{evaluate, write_report, Phase};
use nlgcl_core::graph::{build_graph, normalize, NormalizedAdjacency};
use nlgcl_core::loss::{Denominator, Scope};
use nlgcl_core::model::{export_embeddings, propagate};
use nlgcl_core::trainer::sweep::{grid_sweep, Grid};
use nlgcl_core::trainer::{write_history, Checkpoint, CheckpointError, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "nlgcl", version, about = "Neighbor-layer contrastive learning for graph recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Contrastive scope: hetero or entire.
    #[arg(long)]
    scope: Option<Scope>,
    /// Contrastive denominator: full or in_batch.
    #[arg(long)]
    denominator: Option<Denominator>,
    /// Worker threads for the parallel kernels.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// k-core filter and split a raw interaction file.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw `user<TAB>item` file (overrides `raw_path`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train on a prepared split and report test metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation or test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        phase: String,
    },
    /// Train every cell of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `lambda1=1e-6,1e-5;tau=0.1,0.2` or `layers=1,2,3;groups=1,2`.
        #[arg(long)]
        grid: Grid,
    },
    /// Spectrum of the normalized adjacency and the per-layer decay curves.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Layers for the curves (defaults to the config's `layers`).
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_NODE_CAP)]
        node_cap: usize,
    },
    /// Dump readout embeddings from a checkpoint as TSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file (defaults to `<out>/embeddings.tsv`).
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch { .. } => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return Failure::Numeric(e.to_string());
        }
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Loss { source: nlgcl_core::loss::LossError::InvalidConfig(m), .. } => Failure::Config(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.scope {
        cfg.train.scope = s;
    }
    if let Some(d) = common.denominator {
        cfg.train.denominator = d;
    }
    cfg.train.validate()?;
    set_threads(common.threads)?;
    Ok(cfg)
}

#[cfg(feature = "parallel")]
fn set_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(threads: Option<usize>) -> Result<(), Failure> {
    if threads.is_some_and(|n| n > 1) {
        eprintln!("warning: built without the `parallel` feature, --threads is ignored");
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_failure(&cfg.out_dir, e))?;
    Ok(&cfg.out_dir)
}

fn load_split(cfg: &RunConfig) -> Result<(InteractionDataset, NormalizedAdjacency), Failure> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Failure::Config("`data_dir` is not set; run `prepare` first".into()))?;
    let (ds, _) = read_split(dir)?;
    let graph = build_graph(&ds).map_err(|e| Failure::Data(e.to_string()))?;
    Ok((ds, normalize(graph)))
}

/// Config echo with the provenance header.
fn write_config_echo(dir: &Path, cfg: &RunConfig, meta: &ArtifactMeta) -> Result<(), Failure> {
    let path = dir.join("config.txt");
    fs::write(&path, format!("{meta}\n{}", cfg.train.canonical())).map_err(|e| io_failure(&path, e))
}

fn cmd_prepare(common: &Common, input: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if input.is_some() {
        cfg.raw_path = input;
    }
    let raw_path = cfg
        .raw_path
        .clone()
        .ok_or_else(|| Failure::Config("no input: pass --input or set `raw_path`".into()))?;
    let raw = load_interactions(&raw_path)?;
    let filtered = k_core_filter(&raw, cfg.k_user, cfg.k_item)?;
    let (ds, idmap) = split_per_user(&filtered, cfg.split, cfg.train.seed)?;
    let dir = out_dir(&cfg)?;
    let meta = ArtifactMeta::new(cfg.prepare_hash(), cfg.train.seed);
    write_split(dir, &ds, &idmap, &meta)?;
    let manifest = format!(
        "{meta}\nsource\t{}\nk_user\t{}\nk_item\t{}\nsplit\t{:?},{:?},{:?}\nraw_interactions\t{}\nkept_interactions\t{}\nusers\t{}\nitems\t{}\ntrain\t{}\nval\t{}\ntest\t{}\n",
        raw_path.display(),
        cfg.k_user,
        cfg.k_item,
        cfg.split.0,
        cfg.split.1,
        cfg.split.2,
        raw.len(),
        filtered.len(),
        ds.num_users,
        ds.num_items,
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| io_failure(&path, e))?;
    println!(
        "prepared {} users, {} items: {} train / {} val / {} test -> {}",
        ds.num_users,
        ds.num_items,
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, resume: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let (ds, adj) = load_split(&cfg)?;
    let dir = out_dir(&cfg)?.to_path_buf();
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&ds, &adj, cfg.train.clone(), Checkpoint::load(&p)?)?,
        None => Trainer::new(&ds, &adj, cfg.train.clone())?,
    };
    let meta = trainer.meta();
    write_config_echo(&dir, &cfg, &meta)?;
    println!(
        "config {} seed={} d={} L={} G={} batch={} scope={} denominator={} lambda1={:?} lambda2={:?} tau={:?}",
        meta.config_hash,
        cfg.train.seed,
        cfg.train.dim,
        cfg.train.layers,
        cfg.train.groups,
        cfg.train.batch_size,
        cfg.train.scope.as_str(),
        cfg.train.denominator.as_str(),
        cfg.train.lambda1,
        cfg.train.lambda2,
        cfg.train.tau
    );
    let last = dir.join("last.ckpt");
    while !trainer.is_finished() {
        let r = trainer.run_epoch()?;
        println!(
            "epoch {:>4}  loss {:.6}  val ndcg@10 {:.5}",
            r.epoch, r.loss.total, r.val_ndcg10
        );
        trainer.checkpoint().save(&last)?;
    }
    let history = dir.join("history.csv");
    write_history(&history, trainer.history(), &meta).map_err(|e| io_failure(&history, e))?;
    trainer.best_checkpoint().save(dir.join("best.ckpt"))?;
    let model = trainer.finish();
    let report = model.test_report(&ds, &adj)?;
    let path = dir.join("test_report.json");
    write_report(&path, &report, Phase::Test, &meta, model.best_epoch).map_err(|e| io_failure(&path, e))?;
    println!("best epoch {} (val ndcg@10 {:.5})", model.best_epoch, model.best_val_ndcg10);
    for (k, v) in report.metric_map() {
        println!("test {k} = {v:.5}");
    }
    Ok(())
}

fn load_checked(cfg: &RunConfig, path: &Path) -> Result<Checkpoint, Failure> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_config(&cfg.train.hash())?;
    Ok(ckpt)
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, phase: &str) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let phase = match phase {
        "val" => Phase::Val,
        "test" => Phase::Test,
        other => return Err(Failure::Config(format!("unknown phase {other:?} (val or test)"))),
    };
    let ckpt = load_checked(&cfg, checkpoint)?;
    let (ds, adj) = load_split(&cfg)?;
    let stack = propagate(&ckpt.state, &adj, cfg.train.layers).map_err(|e| Failure::Data(e.to_string()))?;
    let report = evaluate(&stack, &ds, phase, &cfg.train.eval_ks).map_err(|e| Failure::Data(e.to_string()))?;
    let meta = ArtifactMeta::new(ckpt.config_hash.clone(), ckpt.seed);
    let name = match phase {
        Phase::Val => "val_report.json",
        Phase::Test => "test_report.json",
    };
    let path = out_dir(&cfg)?.join(name);
    write_report(&path, &report, phase, &meta, ckpt.epoch).map_err(|e| io_failure(&path, e))?;
    for (k, v) in report.metric_map() {
        println!("{k} = {v:.5}");
    }
    Ok(())
}

fn cmd_sweep(common: &Common, grid: &Grid) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let (ds, adj) = load_split(&cfg)?;
    let result = grid_sweep(&ds, &adj, &cfg.train, grid)?;
    for s in &result.skipped {
        eprintln!("skipped {}={} {}={}: {}", result.axes.0, s.labels.0, result.axes.1, s.labels.1, s.reason);
    }
    let meta = ArtifactMeta::new(cfg.train.hash(), cfg.train.seed);
    let path = out_dir(&cfg)?.join("sweep.csv");
    result.write_csv(&path, &meta).map_err(|e| io_failure(&path, e))?;
    println!("{} cells trained, {} skipped -> {}", result.rows.len(), result.skipped.len(), path.display());
    Ok(())
}

fn cmd_analyze(common: &Common, layers: Option<usize>, node_cap: usize) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let layers = layers.unwrap_or(cfg.train.layers);
    if layers == 0 {
        return Err(Failure::Config("--layers must be at least 1".into()));
    }
    let (_, adj) = load_split(&cfg)?;
    let spec = eigendecompose(&adj, node_cap).map_err(|e| Failure::Data(e.to_string()))?;
    let curves = decay_curves(&spec, layers);
    let meta = ArtifactMeta::new(cfg.train.hash(), cfg.train.seed);
    let dir = out_dir(&cfg)?;
    let p = dir.join("spectrum.csv");
    write_spectrum_csv(&p, &spec, &meta).map_err(|e| io_failure(&p, e))?;
    let p = dir.join("curves.csv");
    write_curves_csv(&p, &curves, &meta).map_err(|e| io_failure(&p, e))?;
    let est = estimate_complexity(CostInputs {
        num_edges: adj.graph.num_edges(),
        num_layers: layers,
        dim: cfg.train.dim,
        batch_nodes: cfg.train.batch_size,
        groups: cfg.train.groups,
    });
    let p = dir.join("complexity.tsv");
    let text = format!(
        "{meta}\nencoder\t{}\nbpr\t{}\ncl_hetero\t{}\ncl_entire\t{}\ntotal_hetero\t{}\ntotal_entire\t{}\n",
        est.encoder_ops, est.bpr_ops, est.cl_ops_hetero, est.cl_ops_entire, est.total_hetero, est.total_entire
    );
    fs::write(&p, text).map_err(|e| io_failure(&p, e))?;
    println!(
        "{} eigenvalues, lambda_max {:.6}, lambda_sub {:.6}, {} zero -> {}",
        spec.eigenvalues.len(),
        spec.lambda_max,
        spec.lambda_sub,
        spec.num_zero,
        dir.display()
    );
    Ok(())
}

fn cmd_export(common: &Common, checkpoint: &Path, file: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let ckpt = load_checked(&cfg, checkpoint)?;
    let (_, adj) = load_split(&cfg)?;
    let stack = propagate(&ckpt.state, &adj, cfg.train.layers).map_err(|e| Failure::Data(e.to_string()))?;
    let path = match file {
        Some(f) => f,
        None => out_dir(&cfg)?.join("embeddings.tsv"),
    };
    let meta = ArtifactMeta::new(ckpt.config_hash.clone(), ckpt.seed);
    export_embeddings(&path, &stack, &meta).map_err(|e| io_failure(&path, e))?;
    println!("{} rows -> {}", stack.num_users() + stack.num_items(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare { common, input } => cmd_prepare(common, input.clone()),
        Command::Train { common, resume } => cmd_train(common, resume.clone()),
        Command::Evaluate { common, checkpoint, phase } => cmd_evaluate(common, checkpoint, phase),
        Command::Sweep { common, grid } => cmd_sweep(common, grid),
        Command::Analyze { common, layers, node_cap } => cmd_analyze(common, *layers, *node_cap),
        Command::Export { common, checkpoint, file } => cmd_export(common, checkpoint, file.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nlgcl: {e}");
            ExitCode::from(e.code())
        }
    }
}
