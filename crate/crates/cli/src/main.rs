use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdcn_core::data::{self, MultiViewDataset, SyntheticSpec};
use gdcn_core::experiment::{self, ExperimentConfig, SweepParam};
use gdcn_core::model::Ablation;
use gdcn_core::trainer::{EmbeddingKind, EvalOptions};
use gdcn_core::{ErrorKind, GdcnError, Result};
use serde_json::Value;

/// Multi-view clustering with diffusion-based fusion.
#[derive(Debug, Parser)]
#[command(name = "gdcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file (nested or dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-view dataset.
    Generate {
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        per_cluster: Option<usize>,
        /// Comma-separated view widths.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        separation: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain, fine-tune and evaluate.
    Train {
        /// Dataset directory; overrides `dataset.path`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// One full run per value of B or K.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write fused, projected or per-view embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "fused")]
        which: String,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster and score an existing checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        which: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, extra: Vec<(String, Value)>) -> Result<ExperimentConfig> {
    let mut overrides = common
        .overrides
        .iter()
        .map(|s| experiment::parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    overrides.extend(extra);
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), out.to_string_lossy().into_owned().into()));
    }
    ExperimentConfig::load(common.config.as_deref(), &overrides)
}

fn dataset_override(dataset: &Option<PathBuf>) -> Vec<(String, Value)> {
    dataset
        .iter()
        .map(|p| ("dataset.path".to_string(), Value::from(p.to_string_lossy().into_owned())))
        .collect()
}

fn load_dataset(config: &ExperimentConfig) -> Result<MultiViewDataset> {
    if let Some(path) = &config.dataset.path {
        if !path.is_dir() {
            return Err(GdcnError::config("dataset.path", format!("{} is not a directory", path.display())));
        }
    }
    config.load_dataset()
}

fn generate(
    common: &Common,
    clusters: Option<usize>,
    per_cluster: Option<usize>,
    dims: Option<Vec<usize>>,
    separation: Option<f64>,
) -> Result<()> {
    let config = load_config(common, Vec::new())?;
    let mut spec = config.dataset.synthetic.clone().unwrap_or_default();
    spec = SyntheticSpec {
        clusters: clusters.unwrap_or(spec.clusters),
        per_cluster: per_cluster.unwrap_or(spec.per_cluster),
        dims: dims.unwrap_or(spec.dims),
        separation: separation.unwrap_or(spec.separation),
        seed: common.seed.unwrap_or(spec.seed),
    };
    let out = common.out.clone().unwrap_or(config.out);
    let ds = spec.generate()?;
    data::save_dataset(&ds, &out)?;
    print!("{}", experiment::summary_table(&ds.manifest()));
    Ok(())
}

fn train(common: &Common, dataset: &Option<PathBuf>, ablation: &Option<String>) -> Result<()> {
    let mut extra = dataset_override(dataset);
    if let Some(a) = ablation {
        let parsed: Ablation = a.parse()?;
        extra.push(("ablation".into(), parsed.to_string().into()));
    }
    let config = load_config(common, extra)?;
    let outcome = experiment::run_experiment(&config)?;
    let last = outcome.logs.last();
    eprintln!(
        "trained {} epochs into {}",
        last.map_or(0, |r| r.epoch),
        config.out.display()
    );
    if let Some(m) = outcome.metrics {
        println!("{}", m.to_json());
    }
    Ok(())
}

fn sweep(common: &Common, param: &str, values: &[usize], dataset: &Option<PathBuf>) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let config = load_config(common, dataset_override(dataset))?;
    let rows = experiment::sweep(&config, param, values)?;
    println!("{}", experiment::SWEEP_HEADER);
    for (v, m) in rows {
        println!("{v},{:.6},{:.6},{:.6}", m.acc, m.nmi, m.pur);
    }
    Ok(())
}

fn export(common: &Common, checkpoint: &Path, dataset: &Option<PathBuf>, which: &str) -> Result<()> {
    let which: EmbeddingKind = which.parse()?;
    let config = load_config(common, dataset_override(dataset))?;
    let ds = load_dataset(&config)?;
    for path in experiment::export_embeddings(checkpoint, &ds, which, &config.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, dataset: &Option<PathBuf>, which: &Option<String>) -> Result<()> {
    let config = load_config(common, dataset_override(dataset))?;
    let ds = load_dataset(&config)?;
    let mut opts = EvalOptions::from_config(&config.train);
    opts.seed = config.seed;
    if let Some(w) = which {
        opts.embedding = w.parse()?;
    }
    let report = experiment::eval_checkpoint(checkpoint, &ds, &opts)?;
    if common.out.is_some() {
        std::fs::create_dir_all(&config.out).map_err(GdcnError::io(&config.out))?;
        let path = config.out.join(experiment::METRICS);
        std::fs::write(&path, report.to_json() + "\n").map_err(GdcnError::io(path))?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate {
            clusters,
            per_cluster,
            dims,
            separation,
            common,
        } => generate(common, *clusters, *per_cluster, dims.clone(), *separation),
        Command::Train {
            dataset,
            ablation,
            common,
        } => train(common, dataset, ablation),
        Command::Sweep {
            param,
            values,
            dataset,
            common,
        } => sweep(common, param, values, dataset),
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            which,
            common,
        } => export(common, checkpoint, dataset, which),
        Command::Eval {
            checkpoint,
            dataset,
            which,
            common,
        } => eval(common, checkpoint, dataset, which),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
