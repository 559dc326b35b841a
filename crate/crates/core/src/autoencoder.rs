//! View-specific autoencoders: `z = f(x)`, `x̂ = g(z)`, and the summed
//! squared reconstruction error.

use gdcn_tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::nn::{with_prefix, BoundMlp, Mlp, Parameterized};

/// Encoder `D_m → hidden… → d_m` and mirrored decoder `d_m → …hidden → D_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewAutoencoder {
    pub view_index: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl ViewAutoencoder {
    pub fn init(
        view_index: usize,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(latent_dim);
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        Self {
            view_index,
            encoder: Mlp::init(&enc, rng),
            decoder: Mlp::init(&dec, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAutoencoder {
        BoundAutoencoder {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }

    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> BoundAutoencoder {
        BoundAutoencoder {
            encoder: self.encoder.attach(vars),
            decoder: self.decoder.attach(vars),
        }
    }

    /// Inference-only encoding of an `n × D_m` batch.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(batch.clone());
        let z = bound.encode(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Inference-only decoding of an `n × d_m` batch.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = tape.leaf(latents.clone());
        let x = bound.decode(&mut tape, z)?;
        Ok(tape.value(x).clone())
    }
}

impl Parameterized for ViewAutoencoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = with_prefix("enc", self.encoder.named_params());
        out.extend(with_prefix("dec", self.decoder.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct BoundAutoencoder {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
}

impl BoundAutoencoder {
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.forward_named(tape, x, "encode")
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.decoder.forward_named(tape, z, "decode")
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }
}

/// Latents and reconstructions for every view of a batch.
#[derive(Clone, Debug)]
pub struct ViewPass {
    pub latents: Vec<Var>,
    pub reconstructions: Vec<Var>,
}

pub fn forward_views(tape: &mut Tape, aes: &[BoundAutoencoder], views: &[Var]) -> Result<ViewPass> {
    if aes.len() != views.len() {
        return Err(TensorError::Arity {
            op: "forward_views",
            expected: aes.len(),
            got: views.len(),
        });
    }
    let mut latents = Vec::with_capacity(views.len());
    let mut reconstructions = Vec::with_capacity(views.len());
    for (ae, &x) in aes.iter().zip(views) {
        let z = ae.encode(tape, x)?;
        reconstructions.push(ae.decode(tape, z)?);
        latents.push(z);
    }
    Ok(ViewPass {
        latents,
        reconstructions,
    })
}

/// `Σ_m Σ_i ‖x_i^m − x̂_i^m‖²`, summed, not averaged.
pub fn reconstruction_error(tape: &mut Tape, inputs: &[Var], reconstructions: &[Var]) -> Result<Var> {
    if inputs.len() != reconstructions.len() || inputs.is_empty() {
        return Err(TensorError::Arity {
            op: "reconstruction_error",
            expected: inputs.len(),
            got: reconstructions.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (&x, &xh) in inputs.iter().zip(reconstructions) {
        let diff = tape.sub(x, xh)?;
        let sq = tape.sum_sq(diff)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Runs every autoencoder on its view and returns the summed reconstruction
/// error together with the pass.
pub fn reconstruction_loss(
    tape: &mut Tape,
    aes: &[BoundAutoencoder],
    views: &[Var],
) -> Result<(Var, ViewPass)> {
    let pass = forward_views(tape, aes, views)?;
    let loss = reconstruction_error(tape, views, &pass.reconstructions)?;
    Ok((loss, pass))
}
