//! Experiment configuration and the end-to-end runs behind the command-line
//! tool: training, sweeps, evaluation and embedding export.
//!
//! Configuration is JSON. Keys may be nested objects or dotted paths
//! (`"sgdf.K": 9` is the same as `{"sgdf": {"K": 9}}`); later overrides win.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::contrastive::ContrastiveConfig;
use crate::data::{self, CorruptionSpec, Manifest, MultiViewDataset, SyntheticSpec};
use crate::error::{GdcnError, Result};
use crate::metrics::MetricsReport;
use crate::model::{Ablation, GdcnModel, ModelConfig, ModelSpec};
use crate::sgdf::SgdfSettings;
use crate::trainer::{self, EmbeddingKind, EpochLog, EpochLogger, EvalOptions, FusionContext, TrainConfig};

pub const CONFIG_ECHO: &str = "config.json";
pub const EPOCH_LOG: &str = "epoch_log.csv";
pub const METRICS: &str = "metrics.json";
pub const PRETRAIN_CHECKPOINT: &str = "checkpoint_pretrain.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";

/// Where the data comes from. A `path` takes precedence; otherwise the
/// synthetic spec (default blobs when absent) is generated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSource {
    pub fn load(&self) -> Result<MultiViewDataset> {
        match (&self.path, &self.synthetic) {
            (Some(path), _) => Ok(data::load_dataset(path)?),
            (None, Some(spec)) => Ok(spec.generate()?),
            (None, None) => Ok(SyntheticSpec::default().generate()?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub corruption: Option<CorruptionSpec>,
    pub model: ModelConfig,
    pub sgdf: SgdfSettings,
    pub cl: ContrastiveConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            corruption: None,
            model: ModelConfig::default(),
            sgdf: SgdfSettings::default(),
            cl: ContrastiveConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::None,
            out: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Writes `value` at the dotted `key`, creating objects along the way.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GdcnError::config(key, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(GdcnError::config(key, format!("`{}` is not an object", parts[..i].join("."))));
        }
        let map = node.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        node = map.entry(*part).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    unreachable!("loop returns on the last segment")
}

/// Rewrites dotted keys at any depth into nested objects.
pub fn expand_dotted(value: Value) -> Result<Value> {
    match value {
        Value::Object(map) => {
            let mut out = Value::Object(Map::new());
            for (k, v) in map {
                set_dotted(&mut out, &k, expand_dotted(v)?)?;
            }
            Ok(out)
        }
        other => Ok(other),
    }
}

/// Parses `key=value`; the value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| GdcnError::config(text, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

impl ExperimentConfig {
    /// Builds a config from an optional JSON file and `key=value`
    /// overrides applied in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut root = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(GdcnError::io(path))?;
                let parsed: Value = serde_json::from_str(&text)
                    .map_err(|e| GdcnError::config("<file>", format!("{}: {e}", path.display())))?;
                if !parsed.is_object() {
                    return Err(GdcnError::config("<file>", "top level must be an object"));
                }
                expand_dotted(parsed)?
            }
            None => Value::Object(Map::new()),
        };
        for (key, value) in overrides {
            set_dotted(&mut root, key, expand_dotted(value.clone())?)?;
        }
        Self::from_value(root)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            GdcnError::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        Ok(config)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        FusionContext::new(&self.sgdf, &self.cl)?;
        if self.cl.h_dim == 0 {
            return Err(GdcnError::config("cl.h_dim", "must be at least 1"));
        }
        if let Some(path) = &self.dataset.path {
            if !path.is_dir() {
                return Err(GdcnError::config(
                    "dataset.path",
                    format!("{} is not a directory", path.display()),
                ));
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset and applies any corruption.
    pub fn load_dataset(&self) -> Result<MultiViewDataset> {
        let ds = self.dataset.load()?;
        match &self.corruption {
            Some(spec) if !spec.is_identity() => Ok(data::corrupt(&ds, spec)?),
            _ => Ok(ds),
        }
    }

    pub fn model_spec(&self, ds: &MultiViewDataset) -> ModelSpec {
        ModelSpec {
            view_dims: ds.view_dims(),
            model: self.model.clone(),
            h_dim: self.cl.h_dim,
            ablation: self.ablation,
        }
    }

    pub fn fusion_context(&self) -> Result<FusionContext> {
        FusionContext::new(&self.sgdf, &self.cl)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(GdcnError::io(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(GdcnError::io(path))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: GdcnModel,
    pub logs: Vec<EpochLog>,
    /// Final clustering scores; `None` for unlabeled data.
    pub metrics: Option<MetricsReport>,
}

/// Pretrains, fine-tunes and evaluates. Writes the effective config, the
/// epoch log, a checkpoint after each phase and the final metrics into
/// `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let ds = config.load_dataset()?;
    run_on_dataset(config, &ds)
}

/// As [`run_experiment`] on an already loaded dataset.
pub fn run_on_dataset(config: &ExperimentConfig, ds: &MultiViewDataset) -> Result<RunOutcome> {
    config.validate()?;
    let out = &config.out;
    create_dir(out)?;
    let echo = serde_json::to_string_pretty(&config.to_value()).expect("config serializes");
    write_file(&out.join(CONFIG_ECHO), &(echo + "\n"))?;

    let ctx = config.fusion_context()?;
    let mut model = GdcnModel::init(config.model_spec(ds), config.seed)?;
    let train = TrainConfig {
        seed: config.seed,
        log_path: Some(out.join(EPOCH_LOG)),
        ..config.train.clone()
    };
    let mut logger = EpochLogger::from_config(&train)?;
    trainer::pretrain(&mut model, ds, &train, &ctx, &mut logger)?;
    model.save_checkpoint(&config.sgdf, out.join(PRETRAIN_CHECKPOINT))?;
    trainer::finetune(&mut model, ds, &train, &ctx, &mut logger)?;
    model.save_checkpoint(&config.sgdf, out.join(FINAL_CHECKPOINT))?;

    let metrics = trainer::evaluate(&model, ds, &ctx, &EvalOptions::from_config(&train))?;
    if let Some(m) = &metrics {
        write_file(&out.join(METRICS), &(m.to_json() + "\n"))?;
    }
    log::info!("finished {}: {:?}", out.display(), metrics);
    Ok(RunOutcome {
        model,
        logs: logger.into_rows(),
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    B,
    K,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::B => "B",
            SweepParam::K => "K",
        })
    }
}

impl FromStr for SweepParam {
    type Err = GdcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "b" => Ok(SweepParam::B),
            "K" | "k" => Ok(SweepParam::K),
            other => Err(GdcnError::config("param", format!("expected B or K, got {other:?}"))),
        }
    }
}

pub const SWEEP_HEADER: &str = "value,acc,nmi,pur";

/// One full run per value with everything else (seed included) held fixed.
/// Each run writes into `out/<param>=<value>/`; the summary goes to
/// `out/sweep_<param>.csv`.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[usize]) -> Result<Vec<(usize, MetricsReport)>> {
    config.validate()?;
    if values.is_empty() {
        return Err(GdcnError::config("values", "at least one value is required"));
    }
    let key = format!("sgdf.{param}");
    for &v in values {
        let bad = match param {
            SweepParam::B => v == 0,
            SweepParam::K => v < 2 || v > config.sgdf.total_steps,
        };
        if bad {
            return Err(GdcnError::config(&key, format!("value {v} out of range")));
        }
    }
    let ds = config.load_dataset()?;
    if ds.labels().is_none() {
        return Err(GdcnError::config("dataset", "sweeps need labels"));
    }
    create_dir(&config.out)?;
    let mut rows = Vec::with_capacity(values.len());
    let mut csv = format!("{SWEEP_HEADER}\n");
    for &v in values {
        let mut run = config.clone();
        match param {
            SweepParam::B => run.sgdf.n_chains = v,
            SweepParam::K => run.sgdf.n_points = v,
        }
        run.out = config.out.join(format!("{param}={v}"));
        let outcome = run_on_dataset(&run, &ds)?;
        let m = outcome.metrics.expect("labeled dataset");
        csv.push_str(&format!("{v},{:.6},{:.6},{:.6}\n", m.acc, m.nmi, m.pur));
        rows.push((v, m));
    }
    write_file(&config.out.join(format!("sweep_{param}.csv")), &csv)?;
    Ok(rows)
}

fn ensure_compatible(model: &GdcnModel, ds: &MultiViewDataset) -> Result<()> {
    if model.spec.view_dims != ds.view_dims() {
        return Err(GdcnError::config(
            "dataset",
            format!(
                "checkpoint expects view widths {:?}, dataset has {:?}",
                model.spec.view_dims,
                ds.view_dims()
            ),
        ));
    }
    Ok(())
}

/// Writes headerless CSV embeddings into `out`: `embeddings_fused.csv`,
/// `embeddings_projected.csv`, or `embeddings_view_<m>.csv` per view. Each
/// row holds one sample's values followed by its label when the dataset is
/// labeled. Returns the written paths.
pub fn export_embeddings(
    checkpoint: &Path,
    ds: &MultiViewDataset,
    which: EmbeddingKind,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, sgdf) = GdcnModel::load_checkpoint(checkpoint)?;
    ensure_compatible(&model, ds)?;
    let ctx = FusionContext::new(&sgdf, &ContrastiveConfig::default())?;
    let embeddings = trainer::embed(&model, ds, &ctx, which)?;
    create_dir(out)?;
    let mut paths = Vec::with_capacity(embeddings.len());
    for (m, e) in embeddings.iter().enumerate() {
        let name = match which {
            EmbeddingKind::PerView => format!("embeddings_view_{m}.csv"),
            other => format!("embeddings_{other}.csv"),
        };
        let path = out.join(name);
        let mut text = String::with_capacity(e.len() * 20);
        for i in 0..e.rows() {
            let mut fields: Vec<String> = e.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(labels) = ds.labels() {
                fields.push(labels[i].to_string());
            }
            text.push_str(&fields.join(","));
            text.push('\n');
        }
        write_file(&path, &text)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Scores an existing checkpoint on `ds`.
pub fn eval_checkpoint(checkpoint: &Path, ds: &MultiViewDataset, opts: &EvalOptions) -> Result<MetricsReport> {
    let (model, sgdf) = GdcnModel::load_checkpoint(checkpoint)?;
    ensure_compatible(&model, ds)?;
    let ctx = FusionContext::new(&sgdf, &ContrastiveConfig::default())?;
    let opts = EvalOptions {
        restarts: opts.restarts.max(1),
        ..*opts
    };
    trainer::evaluate(&model, ds, &ctx, &opts)?
        .ok_or_else(|| GdcnError::config("dataset", "evaluation needs labels"))
}

/// Summary table with the columns Dataset, Samples, Views, Clusters and
/// View dimensions.
pub fn summary_table(m: &Manifest) -> String {
    let dims = m.view_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    format!(
        "Dataset\tSamples\tViews\tClusters\tView dimensions\n{}\t{}\t{}\t{}\t{}\n",
        m.name, m.n_samples, m.n_views, m.n_clusters, dims
    )
}
