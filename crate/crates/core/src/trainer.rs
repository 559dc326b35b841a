//! Two-phase training: reconstruction-only pretraining, then joint
//! fine-tuning on reconstruction plus contrastive alignment with gradients
//! flowing through the unrolled fusion sampler.
//!
//! Per batch of `n` samples the objective is `L_rec / n + L_cl`; the
//! contrastive term already carries `1/(2n)`. Epoch logs report
//! batch-size-weighted means of the per-batch terms.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gdcn_tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder;
use crate::contrastive::{self, ContrastiveConfig};
use crate::data::MultiViewDataset;
use crate::error::{GdcnError, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{Ablation, BoundModel, GdcnModel, ParamScope};
use crate::optim::{Adam, AdamConfig, OptimError};
use crate::seed;
use crate::sgdf::{NoiseSchedule, SamplerConfig, SgdfSettings, SgdfError};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const NOISE_TAG: u64 = 0x4E4F_4953;
const KMEANS_TAG: u64 = 0x4B4D_4541;

/// Rows per forward pass when embedding a whole dataset.
const EMBED_CHUNK: usize = 1024;

/// Representation handed to k-means or exported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingKind {
    /// `z*`, or the concatenated condition under the no-sgdf ablation.
    #[default]
    #[serde(rename = "fused")]
    Fused,
    /// Normalized projection `ĥ` of the fused representation.
    #[serde(rename = "projected")]
    Projected,
    /// One matrix per view latent.
    #[serde(rename = "per-view")]
    PerView,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Fused => "fused",
            EmbeddingKind::Projected => "projected",
            EmbeddingKind::PerView => "per-view",
        })
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = GdcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(EmbeddingKind::Fused),
            "projected" => Ok(EmbeddingKind::Projected),
            "per-view" => Ok(EmbeddingKind::PerView),
            other => Err(GdcnError::config(
                "which",
                format!("expected fused, projected or per-view, got {other:?}"),
            )),
        }
    }
}

/// Optimization settings (`train.*` configuration keys). `seed` and
/// `log_path` are filled in by the experiment runner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Evaluate clustering accuracy every this many epochs (and on the last
    /// epoch of each phase); 0 disables per-epoch evaluation.
    pub eval_every: usize,
    pub kmeans_restarts: usize,
    pub embedding: EmbeddingKind,
    /// Scale embedding rows to unit length before k-means.
    pub normalize_embedding: bool,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 200,
            finetune_epochs: 100,
            batch_size: 128,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eval_every: 10,
            kmeans_restarts: 10,
            embedding: EmbeddingKind::Fused,
            normalize_embedding: true,
            seed: 0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(GdcnError::config("train.batch_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GdcnError::config("train.learning_rate", "must be positive"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GdcnError::config(key, "must lie in [0, 1)"));
            }
        }
        if self.kmeans_restarts == 0 {
            return Err(GdcnError::config("train.kmeans_restarts", "must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of the convergence log. Epochs count from 1 and continue across
/// phases. Pretraining rows carry `loss_cl = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_rec: f64,
    pub loss_cl: f64,
    pub loss_total: f64,
    pub acc: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,phase,loss_rec,loss_cl,loss_total,acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let acc = self.acc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.phase, self.loss_rec, self.loss_cl, self.loss_total, acc
        )
    }
}

/// Collects epoch rows and mirrors them to a CSV file when configured.
pub struct EpochLogger {
    rows: Vec<EpochLog>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl EpochLogger {
    pub fn in_memory() -> Self {
        Self {
            rows: Vec::new(),
            sink: None,
        }
    }

    /// Creates (truncates) `path` and writes the header.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(GdcnError::io(parent))?;
        }
        let file = File::create(&path).map_err(GdcnError::io(&path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{EPOCH_LOG_HEADER}").map_err(GdcnError::io(&path))?;
        Ok(Self {
            rows: Vec::new(),
            sink: Some((path, w)),
        })
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        match &config.log_path {
            Some(p) => Self::to_file(p),
            None => Ok(Self::in_memory()),
        }
    }

    pub fn push(&mut self, row: EpochLog) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            writeln!(w, "{}", row.csv_row())
                .and_then(|_| w.flush())
                .map_err(GdcnError::io(path.as_path()))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[EpochLog] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<EpochLog> {
        self.rows
    }
}

/// Sampler and loss settings shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct FusionContext {
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub cl: ContrastiveConfig,
}

impl FusionContext {
    pub fn new(sgdf: &SgdfSettings, cl: &ContrastiveConfig) -> Result<Self> {
        if !(cl.temperature > 0.0 && cl.temperature.is_finite()) {
            return Err(GdcnError::config("cl.temperature", "must be positive"));
        }
        let schedule = sgdf.schedule().map_err(|e| sgdf_config_error(e, "sgdf.T"))?;
        let sampler = sgdf.sampler().map_err(|e| sgdf_config_error(e, "sgdf.K"))?;
        Ok(Self {
            schedule,
            sampler,
            cl: cl.clone(),
        })
    }
}

fn sgdf_config_error(e: SgdfError, key: &str) -> GdcnError {
    let key = match &e {
        SgdfError::Config(msg) if msg.contains("B ") => "sgdf.B",
        _ => key,
    };
    GdcnError::config(key, e.to_string())
}

/// Loss terms of one batch as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct BatchLosses {
    /// Summed reconstruction error divided by the batch size.
    pub rec: Var,
    pub cl: Option<Var>,
    pub total: Var,
    /// Row-normalized fused projections `ĥ`, when the contrastive term ran.
    pub fused_proj: Option<Var>,
}

/// Where the contrastive weights `S` come from.
#[derive(Clone, Copy, Debug)]
pub enum Similarity<'a> {
    /// Built from this batch's fused projections (training).
    FromBatch,
    /// A fixed matrix, e.g. to finite-difference the objective with `S`
    /// held at a point.
    Fixed(&'a Tensor),
}

/// Builds the objective for one batch. `inputs` hold the batch rows of each
/// view; `sample_ids` key the fusion noise.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    bound: &BoundModel,
    inputs: &[Var],
    sample_ids: &[u64],
    phase: Phase,
    ablation: Ablation,
    ctx: &FusionContext,
    sampler: &SamplerConfig,
) -> Result<BatchLosses> {
    batch_objective_with(tape, bound, inputs, sample_ids, phase, ablation, ctx, sampler, Similarity::FromBatch)
}

/// [`batch_objective`] with an explicit source for `S`.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective_with(
    tape: &mut Tape,
    bound: &BoundModel,
    inputs: &[Var],
    sample_ids: &[u64],
    phase: Phase,
    ablation: Ablation,
    ctx: &FusionContext,
    sampler: &SamplerConfig,
    similarity: Similarity<'_>,
) -> Result<BatchLosses> {
    let n = sample_ids.len();
    let (rec_sum, pass) = autoencoder::reconstruction_loss(tape, &bound.autoencoders, inputs)?;
    let rec = tape.scale(rec_sum, 1.0 / n as f64)?;
    if phase == Phase::Pretrain || ablation == Ablation::NoCl {
        return Ok(BatchLosses {
            rec,
            cl: None,
            total: rec,
            fused_proj: None,
        });
    }
    let fused = bound.fuse(tape, &pass.latents, sample_ids, &ctx.schedule, sampler)?;
    let (fused_proj, view_projs) = bound.heads.project(tape, fused, &pass.latents)?;
    let built;
    let s = match similarity {
        Similarity::FromBatch => {
            built = contrastive::compute_similarity(tape.value(fused_proj));
            &built
        }
        Similarity::Fixed(s) => s,
    };
    let cl = contrastive::contrastive_loss(tape, fused_proj, &view_projs, s, &ctx.cl)?;
    let total = tape.add(rec, cl)?;
    Ok(BatchLosses {
        rec,
        cl: Some(cl),
        total,
        fused_proj: Some(fused_proj),
    })
}

/// Shuffled batches of indices; a trailing single sample joins the previous
/// batch since the contrastive term needs at least two rows.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn is_numerical(e: &GdcnError) -> bool {
    matches!(
        e,
        GdcnError::Tensor(TensorError::NonFinite { .. })
            | GdcnError::Sgdf(SgdfError::Tensor(TensorError::NonFinite { .. }))
            | GdcnError::Optim(OptimError::NonFiniteGradient { .. })
    )
}

fn run_phase(
    model: &mut GdcnModel,
    ds: &MultiViewDataset,
    config: &TrainConfig,
    ctx: &FusionContext,
    phase: Phase,
    logger: &mut EpochLogger,
) -> Result<()> {
    config.validate()?;
    if ds.n_samples() < 2 {
        return Err(GdcnError::config("dataset", "training needs at least two samples"));
    }
    let epochs = match phase {
        Phase::Pretrain => config.pretrain_epochs,
        Phase::Finetune => config.finetune_epochs,
    };
    let ablation = model.ablation();
    let scope = match (phase, ablation) {
        (Phase::Pretrain, _) | (Phase::Finetune, Ablation::NoCl) => ParamScope::Autoencoders,
        (Phase::Finetune, _) => ParamScope::All,
    };
    let mut adam = Adam::new(config.adam(), &model.params_in(scope));
    let n = ds.n_samples() as f64;
    let first_epoch = logger.rows().len() + 1;

    for local in 0..epochs {
        let epoch = first_epoch + local;
        let batches = epoch_batches(ds.n_samples(), config.batch_size, seed::derive(config.seed, &[SHUFFLE_TAG, epoch as u64]));
        let (mut rec_sum, mut cl_sum) = (0.0, 0.0);
        for (b, indices) in batches.iter().enumerate() {
            let wrap = |e: GdcnError| {
                if is_numerical(&e) {
                    GdcnError::NonFinite {
                        phase: phase.as_str(),
                        epoch,
                        batch: b,
                        msg: e.to_string(),
                    }
                } else {
                    e
                }
            };
            let sampler = ctx
                .sampler
                .with_seed(seed::derive(ctx.sampler.seed, &[NOISE_TAG, config.seed, epoch as u64, b as u64]));
            let ids: Vec<u64> = indices.iter().map(|&i| i as u64).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let inputs: Vec<Var> = ds.batch(indices).into_iter().map(|t| tape.leaf(t)).collect();
            let losses = batch_objective(&mut tape, &bound, &inputs, &ids, phase, ablation, ctx, &sampler)
                .map_err(wrap)?;
            let grads = tape.backward(losses.total).map_err(|e| wrap(e.into()))?;
            let grads: Vec<Tensor> = bound.vars_in(scope).iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut model.params_in(scope), &grads).map_err(|e| wrap(e.into()))?;

            let weight = indices.len() as f64;
            rec_sum += weight * tape.value(losses.rec).item();
            if let Some(cl) = losses.cl {
                cl_sum += weight * tape.value(cl).item();
            }
        }
        let (loss_rec, loss_cl) = (rec_sum / n, cl_sum / n);
        let evaluate_now = config.eval_every > 0 && (epoch.is_multiple_of(config.eval_every) || local + 1 == epochs);
        let acc = match (evaluate_now, ds.labels()) {
            (true, Some(_)) => evaluate(model, ds, ctx, &EvalOptions::from_config(config))?.map(|r| r.acc),
            _ => None,
        };
        logger.push(EpochLog {
            epoch,
            phase,
            loss_rec,
            loss_cl,
            loss_total: loss_rec + loss_cl,
            acc,
        })?;
        log::debug!("{phase} epoch {epoch}: rec {loss_rec:.6} cl {loss_cl:.6} acc {acc:?}");
    }
    Ok(())
}

/// Trains the autoencoders on reconstruction only. The denoiser and heads
/// are never touched.
pub fn pretrain(
    model: &mut GdcnModel,
    ds: &MultiViewDataset,
    config: &TrainConfig,
    ctx: &FusionContext,
    logger: &mut EpochLogger,
) -> Result<()> {
    run_phase(model, ds, config, ctx, Phase::Pretrain, logger)
}

/// Trains on the joint objective with a fresh optimizer state. Under the
/// no-cl ablation only the autoencoders are updated, on reconstruction.
pub fn finetune(
    model: &mut GdcnModel,
    ds: &MultiViewDataset,
    config: &TrainConfig,
    ctx: &FusionContext,
    logger: &mut EpochLogger,
) -> Result<()> {
    run_phase(model, ds, config, ctx, Phase::Finetune, logger)
}

/// Embeds every sample of `ds`. Fusion noise uses the configured sampler
/// seed and is keyed by row index, so chunking does not affect the result.
/// Returns one matrix, or one per view for [`EmbeddingKind::PerView`].
pub fn embed(model: &GdcnModel, ds: &MultiViewDataset, ctx: &FusionContext, kind: EmbeddingKind) -> Result<Vec<Tensor>> {
    if ds.view_dims() != model.spec.view_dims {
        return Err(GdcnError::config(
            "dataset",
            format!(
                "view widths {:?} do not match the model's {:?}",
                ds.view_dims(),
                model.spec.view_dims
            ),
        ));
    }
    let n = ds.n_samples();
    let outputs = match kind {
        EmbeddingKind::PerView => model.n_views(),
        _ => 1,
    };
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); outputs];
    let mut widths = vec![0; outputs];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let inputs: Vec<Var> = ds.batch(chunk).into_iter().map(|t| tape.leaf(t)).collect();
        let latents: Vec<Var> = bound
            .autoencoders
            .iter()
            .zip(&inputs)
            .map(|(ae, &x)| ae.encode(&mut tape, x))
            .collect::<gdcn_tensor::Result<_>>()?;
        let results: Vec<Var> = match kind {
            EmbeddingKind::PerView => latents,
            EmbeddingKind::Fused | EmbeddingKind::Projected => {
                let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
                let fused = bound.fuse(&mut tape, &latents, &ids, &ctx.schedule, &ctx.sampler)?;
                if kind == EmbeddingKind::Projected {
                    vec![bound.heads.project_fused(&mut tape, fused)?]
                } else {
                    vec![fused]
                }
            }
        };
        for (k, v) in results.into_iter().enumerate() {
            let t = tape.value(v);
            widths[k] = t.cols();
            parts[k].extend_from_slice(t.data());
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, w)| Ok(Tensor::matrix(n, w, data)?))
        .collect()
}

/// How embeddings are clustered for scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub embedding: EmbeddingKind,
    pub restarts: usize,
    pub normalize: bool,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            embedding: config.embedding,
            restarts: config.kmeans_restarts,
            normalize: config.normalize_embedding,
            seed: config.seed,
        }
    }
}

/// Scales every non-zero row to unit length.
pub fn normalize_rows(points: &mut Tensor) {
    for i in 0..points.rows() {
        let row = points.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// K-means on the chosen embedding with `k = n_clusters`, scored against
/// the labels. Per-view embeddings are concatenated. `None` when the
/// dataset is unlabeled.
pub fn evaluate(
    model: &GdcnModel,
    ds: &MultiViewDataset,
    ctx: &FusionContext,
    opts: &EvalOptions,
) -> Result<Option<MetricsReport>> {
    let Some(labels) = ds.labels() else {
        return Ok(None);
    };
    let mut points = match opts.embedding {
        EmbeddingKind::PerView => {
            let views = embed(model, ds, ctx, opts.embedding)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = views.into_iter().map(|v| tape.leaf(v)).collect();
            let cat = tape.concat(&vars)?;
            tape.value(cat).clone()
        }
        kind => embed(model, ds, ctx, kind)?.remove(0),
    };
    if opts.normalize {
        normalize_rows(&mut points);
    }
    let seed = seed::derive(opts.seed, &[KMEANS_TAG]);
    let clustering = metrics::kmeans(&points, ds.n_clusters(), opts.restarts, seed)?;
    Ok(Some(MetricsReport::compute(&clustering.assignments, labels)?))
}
