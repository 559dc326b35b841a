//! The full network: per-view autoencoders, the fusion denoiser and the
//! projection heads, plus JSON checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use gdcn_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{BoundAutoencoder, ViewAutoencoder};
use crate::contrastive::{BoundHeads, ProjectionHeads};
use crate::error::{GdcnError, Result};
use crate::nn::{with_prefix, Parameterized};
use crate::seed;
use crate::sgdf::{self, BoundDenoiser, Denoiser, NoiseSchedule, SamplerConfig, SgdfSettings};

pub const CHECKPOINT_FORMAT: &str = "gdcn-checkpoint-v1";

/// Pipeline variant. `NoSgdf` uses the concatenated condition as the fused
/// representation; `NoCl` drops the contrastive term and never trains the
/// heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "no-sgdf")]
    NoSgdf,
    #[serde(rename = "no-cl")]
    NoCl,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoSgdf => "no-sgdf",
            Ablation::NoCl => "no-cl",
        })
    }
}

impl FromStr for Ablation {
    type Err = GdcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-sgdf" => Ok(Ablation::NoSgdf),
            "no-cl" => Ok(Ablation::NoCl),
            other => Err(GdcnError::config(
                "ablation",
                format!("expected none, no-sgdf or no-cl, got {other:?}"),
            )),
        }
    }
}

/// Layer widths (`model.*` configuration keys). The fused width equals
/// `latent_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub denoiser_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            encoder_hidden: vec![500, 500],
            denoiser_hidden: vec![256, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(GdcnError::config("model.latent_dim", "must be at least 1"));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(GdcnError::config("model.encoder_hidden", "widths must be at least 1"));
        }
        if self.denoiser_hidden.contains(&0) {
            return Err(GdcnError::config("model.denoiser_hidden", "widths must be at least 1"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub view_dims: Vec<usize>,
    pub model: ModelConfig,
    pub h_dim: usize,
    pub ablation: Ablation,
}

/// Which parameters an optimizer step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamScope {
    Autoencoders,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdcnModel {
    pub spec: ModelSpec,
    pub autoencoders: Vec<ViewAutoencoder>,
    /// Absent under [`Ablation::NoSgdf`].
    pub denoiser: Option<Denoiser>,
    pub heads: ProjectionHeads,
}

impl GdcnModel {
    /// Each component draws from its own derived seed, so autoencoder
    /// initialization does not depend on the ablation.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.model.validate()?;
        if spec.view_dims.is_empty() || spec.view_dims.contains(&0) {
            return Err(GdcnError::config("view_dims", "every view needs at least one feature"));
        }
        if spec.h_dim == 0 {
            return Err(GdcnError::config("cl.h_dim", "must be at least 1"));
        }
        let d = spec.model.latent_dim;
        let m = spec.view_dims.len();
        let autoencoders = spec
            .view_dims
            .iter()
            .enumerate()
            .map(|(v, &dim)| {
                let mut rng = seed::rng(seed::derive(seed, &[1, v as u64]));
                ViewAutoencoder::init(v, dim, &spec.model.encoder_hidden, d, &mut rng)
            })
            .collect();
        let denoiser = (spec.ablation != Ablation::NoSgdf).then(|| {
            let mut rng = seed::rng(seed::derive(seed, &[2]));
            Denoiser::init(d, m * d, &spec.model.denoiser_hidden, &mut rng)
        });
        let mut rng = seed::rng(seed::derive(seed, &[3]));
        let heads = ProjectionHeads::init(Self::fused_dim_of(&spec), &vec![d; m], spec.h_dim, &mut rng);
        Ok(Self {
            spec,
            autoencoders,
            denoiser,
            heads,
        })
    }

    fn fused_dim_of(spec: &ModelSpec) -> usize {
        match spec.ablation {
            Ablation::NoSgdf => spec.view_dims.len() * spec.model.latent_dim,
            _ => spec.model.latent_dim,
        }
    }

    /// Width of the representation handed to clustering.
    pub fn fused_dim(&self) -> usize {
        Self::fused_dim_of(&self.spec)
    }

    pub fn n_views(&self) -> usize {
        self.autoencoders.len()
    }

    pub fn ablation(&self) -> Ablation {
        self.spec.ablation
    }

    /// Records every parameter as a leaf, in [`Parameterized`] order.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        self.attach(&vars)
    }

    /// Builds a bound model from one var per parameter, in
    /// [`Parameterized`] order.
    pub fn attach(&self, vars: &[Var]) -> BoundModel {
        assert_eq!(vars.len(), self.named_params().len(), "one var per parameter");
        let mut it = vars.iter().copied();
        let autoencoders = self.autoencoders.iter().map(|ae| ae.attach(&mut it)).collect();
        let denoiser = self.denoiser.as_ref().map(|d| d.attach(&mut it));
        let heads = self.heads.attach(&mut it);
        BoundModel {
            autoencoders,
            denoiser,
            heads,
            all: vars.to_vec(),
            ae_count: self.autoencoders.iter().map(|a| a.named_params().len()).sum(),
        }
    }

    pub fn params_in(&mut self, scope: ParamScope) -> Vec<&mut Tensor> {
        match scope {
            ParamScope::Autoencoders => self.autoencoders.iter_mut().flat_map(|a| a.params_mut()).collect(),
            ParamScope::All => self.params_mut(),
        }
    }

    pub fn save_checkpoint(&self, sgdf: &SgdfSettings, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            spec: self.spec.clone(),
            sgdf: sgdf.clone(),
            tensors: self
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| GdcnError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(GdcnError::io(path))
    }

    /// Returns the model and the sampler settings it was trained with.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Self, SgdfSettings)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(GdcnError::io(path))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| GdcnError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(GdcnError::Checkpoint(format!("unsupported format {:?}", ckpt.format)));
        }
        let mut model = Self::init(ckpt.spec, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != ckpt.tensors.len() {
            return Err(GdcnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ckpt.tensors.len()
            )));
        }
        for ((name, param), stored) in names.iter().zip(model.params_mut()).zip(ckpt.tensors) {
            if *name != stored.name || param.shape() != stored.shape.as_slice() {
                return Err(GdcnError::Checkpoint(format!(
                    "tensor {:?} {:?} does not match {name:?} {:?}",
                    stored.name,
                    stored.shape,
                    param.shape()
                )));
            }
            *param = Tensor::new(stored.shape, stored.values)
                .map_err(|e| GdcnError::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok((model, ckpt.sgdf))
    }
}

impl Parameterized for GdcnModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, ae) in self.autoencoders.iter().enumerate() {
            out.extend(with_prefix(&format!("ae{m}"), ae.named_params()));
        }
        if let Some(d) = &self.denoiser {
            out.extend(with_prefix("denoiser", d.named_params()));
        }
        out.extend(with_prefix("heads", self.heads.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.autoencoders.iter_mut().flat_map(|a| a.params_mut()).collect();
        if let Some(d) = &mut self.denoiser {
            out.extend(d.params_mut());
        }
        out.extend(self.heads.params_mut());
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    spec: ModelSpec,
    sgdf: SgdfSettings,
    tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub autoencoders: Vec<BoundAutoencoder>,
    pub denoiser: Option<BoundDenoiser>,
    pub heads: BoundHeads,
    all: Vec<Var>,
    ae_count: usize,
}

impl BoundModel {
    pub fn vars_in(&self, scope: ParamScope) -> &[Var] {
        match scope {
            ParamScope::Autoencoders => &self.all[..self.ae_count],
            ParamScope::All => &self.all,
        }
    }

    /// `z*` for the batch, or the concatenated condition when there is no
    /// denoiser.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        latents: &[Var],
        sample_ids: &[u64],
        schedule: &NoiseSchedule,
        sampler: &SamplerConfig,
    ) -> Result<Var> {
        match &self.denoiser {
            Some(d) => Ok(sgdf::fuse(tape, latents, sample_ids, d, schedule, sampler)?),
            None => Ok(sgdf::build_condition(tape, latents)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(ablation: Ablation) -> ModelSpec {
        ModelSpec {
            view_dims: vec![3, 5],
            model: ModelConfig {
                latent_dim: 4,
                encoder_hidden: vec![6],
                denoiser_hidden: vec![7],
            },
            h_dim: 3,
            ablation,
        }
    }

    #[test]
    fn ablation_parses_and_prints() {
        for a in [Ablation::None, Ablation::NoSgdf, Ablation::NoCl] {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("w/o-cl".parse::<Ablation>().is_err());
    }

    #[test]
    fn no_sgdf_drops_the_denoiser_and_widens_the_fused_head() {
        let full = GdcnModel::init(small_spec(Ablation::None), 5).unwrap();
        let ablated = GdcnModel::init(small_spec(Ablation::NoSgdf), 5).unwrap();
        assert!(ablated.denoiser.is_none());
        assert_eq!(full.fused_dim(), 4);
        assert_eq!(ablated.fused_dim(), 8);
        assert_eq!(ablated.heads.fused_head.in_dim(), 8);
        assert_eq!(full.autoencoders, ablated.autoencoders);
    }

    #[test]
    fn bound_vars_follow_parameter_order() {
        let model = GdcnModel::init(small_spec(Ablation::None), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let params = model.named_params();
        assert_eq!(bound.vars_in(ParamScope::All).len(), params.len());
        for (v, (_, t)) in bound.vars_in(ParamScope::All).iter().zip(&params) {
            assert_eq!(tape.value(*v), *t);
        }
        assert_eq!(bound.vars_in(ParamScope::Autoencoders).len(), 2 * 8);
        assert_eq!(bound.heads.vars().len(), 6);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model = GdcnModel::init(small_spec(Ablation::NoCl), 9).unwrap();
        let sgdf = SgdfSettings::default();
        model.save_checkpoint(&sgdf, &path).unwrap();
        let (back, back_sgdf) = GdcnModel::load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_sgdf, sgdf);
    }

    #[test]
    fn invalid_widths_name_their_key() {
        let mut spec = small_spec(Ablation::None);
        spec.model.latent_dim = 0;
        match GdcnModel::init(spec, 0) {
            Err(GdcnError::Config { key, .. }) => assert_eq!(key, "model.latent_dim"),
            other => panic!("{other:?}"),
        }
    }
}
