//! Stochastic generative diffusion fusion.
//!
//! Per-view latents are concatenated into a condition `c_i`. For each sample
//! `B` chains start from standard-normal noise at time `T − 1` and are walked
//! down an accelerated `K`-point time grid by a conditional denoiser; the
//! fused representation is the mean of the `B` final states.
//!
//! The printed single-step coefficients (`β = ᾱ_s/ᾱ_t`, `σ² =
//! (1−ᾱ_s)/(1−ᾱ_t)`, `γ = 1 − β − σ²`) give `γ < 0` for every decreasing
//! pair of times, so `√γ` does not exist. [`FusionMode::DdimX0`] (default)
//! reads the denoiser output as a clean-signal estimate and applies the
//! deterministic DDIM update; [`FusionMode::LiteralClamped`] keeps the
//! printed coefficients with negative radicands clamped to zero.

use std::fmt;
use std::str::FromStr;

use gdcn_tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BoundMlp, Mlp, Parameterized};

/// Lower clamp applied to every `ᾱ_t`.
pub const EPSILON_FLOOR: f64 = 1e-6;

/// Offset added to `t/T` inside the square root of the schedule.
const SCHEDULE_OFFSET: f64 = 1e-4;

/// Spacing between per-chain seeds derived from one master seed.
const CHAIN_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SgdfError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time step {t} outside [0, {total})")]
    TimeOutOfRange { t: usize, total: usize },
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
}

pub type Result<T, E = SgdfError> = std::result::Result<T, E>;

/// Square-root noise schedule `ᾱ_t = 1 − sqrt(t/T + 1e-4)`, clamped to
/// `[EPSILON_FLOOR, 1]` and tabulated for `t ∈ [0, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(total_steps: usize) -> Result<Self> {
        if total_steps < 2 {
            return Err(SgdfError::Config(format!(
                "T must be at least 2, got {total_steps}"
            )));
        }
        let t_total = total_steps as f64;
        let alpha_bar = (0..total_steps)
            .map(|t| (1.0 - (t as f64 / t_total + SCHEDULE_OFFSET).sqrt()).clamp(EPSILON_FLOOR, 1.0))
            .collect();
        Ok(Self {
            total_steps,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(SgdfError::TimeOutOfRange {
                t,
                total: self.total_steps,
            })
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Accelerated sampling times `τ_k = ⌊T − 1 − k·(T−1)/(K−1)⌋`, `k = 0…K−1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeGrid {
    times: Vec<usize>,
}

impl TimeGrid {
    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }
}

/// Builds the `K`-point grid for `T` total steps with exact integer
/// arithmetic: `τ_k = ⌊(T−1)(K−1−k) / (K−1)⌋`.
pub fn make_grid(total_steps: usize, n_points: usize) -> Result<TimeGrid> {
    if n_points < 2 {
        return Err(SgdfError::Grid(format!("K must be at least 2, got {n_points}")));
    }
    if total_steps < 2 {
        return Err(SgdfError::Grid(format!("T must be at least 2, got {total_steps}")));
    }
    if n_points > total_steps {
        return Err(SgdfError::Grid(format!(
            "K = {n_points} exceeds T = {total_steps}"
        )));
    }
    let span = (total_steps - 1) as u128;
    let intervals = (n_points - 1) as u128;
    let times: Vec<usize> = (0..n_points as u128)
        .map(|k| (span * (intervals - k) / intervals) as usize)
        .collect();
    if times.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SgdfError::Grid(format!("duplicate times after flooring: {times:?}")));
    }
    Ok(TimeGrid { times })
}

/// How a single reverse step combines the current state with the
/// denoiser's prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    #[default]
    #[serde(rename = "ddim-x0")]
    DdimX0,
    #[serde(rename = "literal-clamped")]
    LiteralClamped,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::DdimX0 => "ddim-x0",
            FusionMode::LiteralClamped => "literal-clamped",
        })
    }
}

impl FromStr for FusionMode {
    type Err = SgdfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim-x0" => Ok(FusionMode::DdimX0),
            "literal-clamped" => Ok(FusionMode::LiteralClamped),
            other => Err(SgdfError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Serializable sampler settings (`sgdf.*` configuration keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdfSettings {
    #[serde(rename = "T")]
    pub total_steps: usize,
    #[serde(rename = "K")]
    pub n_points: usize,
    #[serde(rename = "B")]
    pub n_chains: usize,
    pub mode: FusionMode,
    pub seed: u64,
}

impl Default for SgdfSettings {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            n_points: 5,
            n_chains: 4,
            mode: FusionMode::DdimX0,
            seed: 0,
        }
    }
}

impl SgdfSettings {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.total_steps)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::new(
            self.n_chains,
            make_grid(self.total_steps, self.n_points)?,
            self.mode,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub grid: TimeGrid,
    pub mode: FusionMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(n_chains: usize, grid: TimeGrid, mode: FusionMode, seed: u64) -> Result<Self> {
        if n_chains == 0 {
            return Err(SgdfError::Config("B must be at least 1".into()));
        }
        if grid.n_points() < 2 {
            return Err(SgdfError::Config("K must be at least 2".into()));
        }
        Ok(Self {
            n_chains,
            grid,
            mode,
            seed,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Seed of chain `chain` under master seed `seed`. Chain 0 uses the master
/// seed itself, so a one-chain run seeded with `chain_seed(s, b)` replays
/// chain `b` of a run seeded with `s`.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    seed.wrapping_add((chain as u64).wrapping_mul(CHAIN_SEED_STRIDE))
}

/// Initial chain states: `B·n × d`, block `b` row `i` drawn from the
/// ChaCha stream keyed by (`chain_seed(seed, b)`, `sample_ids[i]`).
pub fn initial_noise(n_chains: usize, sample_ids: &[u64], dim: usize, seed: u64) -> Tensor {
    let n = sample_ids.len();
    let mut data = Vec::with_capacity(n_chains * n * dim);
    for b in 0..n_chains {
        let key = chain_seed(seed, b);
        for &id in sample_ids {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(id);
            data.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
    }
    Tensor::matrix(n_chains * n, dim, data).expect("sized buffer")
}

/// Produces the denoiser's estimate `z_p` from a state and its condition.
pub trait Predictor {
    fn fused_dim(&self) -> usize;
    fn predict(&self, tape: &mut Tape, state: Var, condition: Var) -> gdcn_tensor::Result<Var>;
}

/// `z_p = MLP(cat(z_t, c_i))`: `(d + M·d_m) → hidden… → d`. Glorot init
/// except for the first-layer weights reading `z_t`, which start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub mlp: Mlp,
    pub fused_dim: usize,
}

impl Denoiser {
    pub fn init(fused_dim: usize, condition_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut widths = vec![fused_dim + condition_dim];
        widths.extend_from_slice(hidden);
        widths.push(fused_dim);
        let mut mlp = Mlp::init(&widths, rng);
        // The state rows of the first layer start at zero: the untrained
        // sampler is then a deterministic function of the condition and
        // sensitivity to the chain noise is learned.
        let first = &mut mlp.layers[0].weight;
        for r in 0..fused_dim {
            first.row_mut(r).iter_mut().for_each(|w| *w = 0.0);
        }
        Self {
            mlp,
            fused_dim,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.mlp.in_dim() - self.fused_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDenoiser {
        BoundDenoiser {
            mlp: self.mlp.bind(tape),
            fused_dim: self.fused_dim,
        }
    }

    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> BoundDenoiser {
        BoundDenoiser {
            mlp: self.mlp.attach(vars),
            fused_dim: self.fused_dim,
        }
    }
}

impl Parameterized for Denoiser {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    pub mlp: BoundMlp,
    fused_dim: usize,
}

impl BoundDenoiser {
    pub fn vars(&self) -> Vec<Var> {
        self.mlp.vars()
    }
}

impl Predictor for BoundDenoiser {
    fn fused_dim(&self) -> usize {
        self.fused_dim
    }

    fn predict(&self, tape: &mut Tape, state: Var, condition: Var) -> gdcn_tensor::Result<Var> {
        let input = tape.concat(&[state, condition])?;
        self.mlp.forward_named(tape, input, "denoiser")
    }
}

/// `c_i = cat(z_i^1, …, z_i^M)`: each view once, in view order.
pub fn build_condition(tape: &mut Tape, latents: &[Var]) -> gdcn_tensor::Result<Var> {
    match latents {
        [] => Err(TensorError::Arity {
            op: "build_condition",
            expected: 1,
            got: 0,
        }),
        [single] => Ok(*single),
        many => tape.concat(many).map_err(|e| match e {
            TensorError::Shape { shapes, .. } => TensorError::Shape {
                op: "build_condition",
                shapes,
            },
            other => other,
        }),
    }
}

/// One reverse step of the chain from time `from` to time `to`.
///
/// Stepping out of time 0 (`from == to == 0`) returns the state unchanged
/// without consulting the predictor. Otherwise `to < from` is required and
/// the step combines the state with `z_p` according to `mode`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<P: Predictor + ?Sized>(
    tape: &mut Tape,
    state: Var,
    condition: Var,
    from: usize,
    to: usize,
    predictor: &P,
    schedule: &NoiseSchedule,
    mode: FusionMode,
) -> Result<Var> {
    if from == 0 {
        if to != 0 {
            return Err(SgdfError::Grid(format!("cannot step from 0 to {to}")));
        }
        return Ok(state);
    }
    if to >= from {
        return Err(SgdfError::Grid(format!(
            "reverse step must decrease time, got {from} -> {to}"
        )));
    }
    let a_from = schedule.alpha_bar(from)?;
    let a_to = schedule.alpha_bar(to)?;
    let z_p = predictor.predict(tape, state, condition)?;
    let out = match mode {
        FusionMode::DdimX0 => {
            // ε̂ = (z_u − √ᾱ_u·z_p)/√(1−ᾱ_u);  z_v = √ᾱ_v·z_p + √(1−ᾱ_v)·ε̂
            let signal = tape.scale(z_p, a_from.sqrt())?;
            let residual = tape.sub(state, signal)?;
            let eps = tape.scale(residual, 1.0 / (1.0 - a_from).sqrt())?;
            let clean = tape.scale(z_p, a_to.sqrt())?;
            let noise = tape.scale(eps, (1.0 - a_to).sqrt())?;
            tape.add(clean, noise)?
        }
        FusionMode::LiteralClamped => {
            let (beta, _sigma_sq, gamma) = literal_coefficients(a_to, a_from);
            let kept = tape.scale(state, beta.max(0.0).sqrt())?;
            let pred = tape.scale(z_p, gamma.max(0.0).sqrt())?;
            tape.add(kept, pred)?
        }
    };
    Ok(out)
}

/// `(β, σ², γ)` for a step that lands at `ᾱ_s` from `ᾱ_t`.
pub fn literal_coefficients(alpha_bar_s: f64, alpha_bar_t: f64) -> (f64, f64, f64) {
    let beta = alpha_bar_s / alpha_bar_t;
    let sigma_sq = (1.0 - alpha_bar_s) / (1.0 - alpha_bar_t);
    (beta, sigma_sq, 1.0 - beta - sigma_sq)
}

/// Runs `B` chains per sample along the grid and averages their final
/// states. `sample_ids` key each row's noise so results do not depend on
/// batch composition or order. All `B` chains are stacked into one
/// `B·n`-row state so every step is a single denoiser call.
pub fn fuse<P: Predictor + ?Sized>(
    tape: &mut Tape,
    latents: &[Var],
    sample_ids: &[u64],
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Var> {
    let condition = build_condition(tape, latents)?;
    let n = tape.shape(condition)[0];
    if n == 0 || sample_ids.len() != n {
        return Err(SgdfError::Config(format!(
            "{} sample ids for a batch of {n}",
            sample_ids.len()
        )));
    }
    let chains = config.n_chains;
    let noise = initial_noise(chains, sample_ids, predictor.fused_dim(), config.seed);
    let mut state = tape.leaf(noise);
    let condition = if chains > 1 {
        tape.repeat_rows(condition, chains)?
    } else {
        condition
    };
    for pair in config.grid.times().windows(2) {
        state = denoise_step(
            tape,
            state,
            condition,
            pair[0],
            pair[1],
            predictor,
            schedule,
            config.mode,
        )?;
    }
    if chains > 1 {
        state = tape.mean_blocks(state, chains)?;
    }
    Ok(state)
}
