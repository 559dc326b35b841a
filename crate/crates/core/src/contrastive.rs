//! Projection heads and the structure-weighted contrastive loss between the
//! fused representation and each view.
//!
//! With unit-norm projections `ĥ_i` (fused) and `h_j^m` (view `m`), cosine
//! similarity is a plain dot product and the loss is
//!
//! ```text
//! L = −1/(2n) Σ_i Σ_m log[ exp(C(ĥ_i, h_i^m)/τ) / (Σ_j exp((1 − S_ij)·C(ĥ_i, h_j^m)/τ) − exp(1/τ)) ]
//! ```
//!
//! `S` is a constant built from the fused projections, see
//! [`compute_similarity`]. The bracketed denominator is clamped below at
//! [`DENOMINATOR_FLOOR`] before the log.

use gdcn_tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{with_prefix, BoundLinear, Linear, Parameterized};

pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Temperature and projection width (`cl.*` configuration keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub h_dim: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            h_dim: 128,
        }
    }
}

/// One linear head for the fused representation and one per view, all
/// mapping to `h_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub fused_head: Linear,
    pub view_heads: Vec<Linear>,
}

impl ProjectionHeads {
    pub fn init(fused_dim: usize, view_latent_dims: &[usize], h_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fused_head: Linear::init(fused_dim, h_dim, rng),
            view_heads: view_latent_dims
                .iter()
                .map(|&d| Linear::init(d, h_dim, rng))
                .collect(),
        }
    }

    pub fn h_dim(&self) -> usize {
        self.fused_head.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHeads {
        BoundHeads {
            fused_head: self.fused_head.bind(tape),
            view_heads: self.view_heads.iter().map(|h| h.bind(tape)).collect(),
            fused_dim: self.fused_head.in_dim(),
            view_dims: self.view_heads.iter().map(Linear::in_dim).collect(),
        }
    }

    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> BoundHeads {
        BoundHeads {
            fused_head: self.fused_head.attach(vars),
            view_heads: self.view_heads.iter().map(|h| h.attach(vars)).collect(),
            fused_dim: self.fused_head.in_dim(),
            view_dims: self.view_heads.iter().map(Linear::in_dim).collect(),
        }
    }
}

impl Parameterized for ProjectionHeads {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = with_prefix("fused", self.fused_head.named_params());
        for (m, h) in self.view_heads.iter().enumerate() {
            out.extend(with_prefix(&format!("view{m}"), h.named_params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.fused_head.params_mut();
        for h in &mut self.view_heads {
            out.extend(h.params_mut());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BoundHeads {
    pub fused_head: BoundLinear,
    pub view_heads: Vec<BoundLinear>,
    fused_dim: usize,
    view_dims: Vec<usize>,
}

impl BoundHeads {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.fused_head.vars().to_vec();
        v.extend(self.view_heads.iter().flat_map(|h| h.vars()));
        v
    }

    /// Projects and row-normalizes the fused batch.
    pub fn project_fused(&self, tape: &mut Tape, fused: Var) -> gdcn_tensor::Result<Var> {
        check_width(tape, fused, self.fused_dim)?;
        let h = self.fused_head.forward(tape, fused)?;
        tape.normalize_rows(h)
    }

    /// Returns `(ĥ, [h^1 … h^M])`, every row unit-norm.
    pub fn project(&self, tape: &mut Tape, fused: Var, latents: &[Var]) -> gdcn_tensor::Result<(Var, Vec<Var>)> {
        if latents.len() != self.view_heads.len() {
            return Err(TensorError::Arity {
                op: "project",
                expected: self.view_heads.len(),
                got: latents.len(),
            });
        }
        let fused_proj = self.project_fused(tape, fused)?;
        let mut views = Vec::with_capacity(latents.len());
        for ((head, &z), &dim) in self.view_heads.iter().zip(latents).zip(&self.view_dims) {
            check_width(tape, z, dim)?;
            let h = head.forward(tape, z)?;
            views.push(tape.normalize_rows(h)?);
        }
        Ok((fused_proj, views))
    }
}

fn check_width(tape: &Tape, x: Var, want: usize) -> gdcn_tensor::Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != want {
        return Err(TensorError::Shape {
            op: "project",
            shapes: vec![shape.to_vec(), vec![want]],
        });
    }
    Ok(())
}

/// `S_ij = (1 + ĥ_i·ĥ_j)/2` for `i ≠ j`, `S_ii = 0`, from unit-norm rows.
pub fn compute_similarity(fused_proj: &Tensor) -> Tensor {
    let n = fused_proj.rows();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dot: f64 = fused_proj
                    .row(i)
                    .iter()
                    .zip(fused_proj.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                s[i * n + j] = (1.0 + dot) / 2.0;
            }
        }
    }
    Tensor::matrix(n, n, s).expect("sized buffer")
}

/// The contrastive loss above. `fused_proj` and every entry of `view_projs`
/// must have unit-norm rows; `similarity` is treated as a constant.
pub fn contrastive_loss(
    tape: &mut Tape,
    fused_proj: Var,
    view_projs: &[Var],
    similarity: &Tensor,
    config: &ContrastiveConfig,
) -> gdcn_tensor::Result<Var> {
    let n = tape.shape(fused_proj)[0];
    if n < 2 {
        return Err(TensorError::InvalidArgument {
            op: "contrastive_loss",
            msg: format!("needs at least 2 samples, got {n}"),
        });
    }
    if config.temperature.is_nan() || config.temperature <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "contrastive_loss",
            msg: format!("temperature must be positive, got {}", config.temperature),
        });
    }
    if similarity.shape() != [n, n] {
        return Err(TensorError::Shape {
            op: "contrastive_loss",
            shapes: vec![similarity.shape().to_vec(), vec![n, n]],
        });
    }
    let inv_tau = 1.0 / config.temperature;
    let weights = tape.leaf(similarity.map(|s| (1.0 - s) * inv_tau));

    let mut total: Option<Var> = None;
    for &view in view_projs {
        let positive = tape.cosine_sim(fused_proj, view)?;
        let positive = tape.scale(positive, inv_tau)?;

        // cosines[i, j] = ĥ_i · h_j^m
        let view_t = tape.transpose(view)?;
        let cosines = tape.matmul(fused_proj, view_t)?;
        let logits = tape.mul(cosines, weights)?;
        let exps = tape.exp(logits)?;
        let denom = tape.sum_rows(exps)?;
        let denom = tape.add_scalar(denom, -inv_tau.exp())?;
        let denom = tape.clamp_min(denom, DENOMINATOR_FLOOR)?;
        let log_denom = tape.log(denom)?;

        let log_ratio = tape.sub(positive, log_denom)?;
        let term = tape.sum(log_ratio)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or(TensorError::Arity {
        op: "contrastive_loss",
        expected: 1,
        got: 0,
    })?;
    tape.scale(total, -1.0 / (2.0 * n as f64))
}
