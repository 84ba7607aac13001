//! Random-walk Metropolis–Hastings against a biased target, the adaptive
//! driver that learns the bias, and the frozen-bias sampling phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias::{BiasGrid, BiasProfile};
use crate::model::{MixtureLayout, ModelError, TargetModel};
use crate::reaction::{CoordinateKind, ReactionCoordinate, ReactionCoordinateSpec, ReactionError, Scheme};
use crate::trace::{ChainTrace, ConvergenceEntry, TraceRecord};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Reaction(#[from] ReactionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite potential {value} at iteration {iter}; state {state:?}")]
    NonFinite { iter: u64, value: f64, state: Vec<f64> },
    #[error("cached potential drifted from a fresh evaluation at iteration {iter}")]
    CacheMismatch { iter: u64 },
    #[error("could not place the initial state inside the interval: {0}")]
    InitialState(String),
    #[error("profiles have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalFamily {
    Gaussian,
    Cauchy,
}

impl std::str::FromStr for ProposalFamily {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "cauchy" => Ok(Self::Cauchy),
            _ => Err(SamplerError::Config(format!("unknown proposal family {s:?}"))),
        }
    }
}

/// Random-walk scales for the mixture blocks: free weights, means,
/// precisions and `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalScales {
    pub tau_q: f64,
    pub tau_mu: f64,
    pub tau_v: f64,
    pub tau_beta: f64,
    pub family: ProposalFamily,
}

impl ProposalScales {
    pub fn validate(&self) -> Result<(), SamplerError> {
        for (name, v) in [
            ("tau_q", self.tau_q),
            ("tau_mu", self.tau_mu),
            ("tau_v", self.tau_v),
            ("tau_beta", self.tau_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SamplerError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Per-coordinate kernel on the flat mixture layout.
    pub fn kernel(&self, layout: MixtureLayout) -> ProposalKernel {
        let mut scales = vec![0.0; layout.dimension()];
        scales[layout.q_range()].fill(self.tau_q);
        scales[layout.mu_range()].fill(self.tau_mu);
        scales[layout.lambda_range()].fill(self.tau_v);
        scales[layout.beta_index()] = self.tau_beta;
        ProposalKernel {
            scales,
            family: self.family,
        }
    }
}

/// Symmetric random walk `x' = x + scale ⊙ noise`, all coordinates moved
/// jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalKernel {
    pub scales: Vec<f64>,
    pub family: ProposalFamily,
}

impl ProposalKernel {
    pub fn isotropic(dim: usize, scale: f64, family: ProposalFamily) -> Self {
        Self {
            scales: vec![scale; dim],
            family,
        }
    }

    fn propose<R: Rng>(&self, x: &[f64], out: &mut Vec<f64>, rng: &mut R) {
        out.clear();
        for (xi, &s) in x.iter().zip(&self.scales) {
            let noise: f64 = match self.family {
                ProposalFamily::Gaussian => StandardNormal.sample(rng),
                ProposalFamily::Cauchy => (std::f64::consts::PI * (rng.random::<f64>() - 0.5)).tan(),
            };
            out.push(xi + s * noise);
        }
    }
}

/// Current state with cached `ξ`, `V`, bin and (for ABF) force.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub xi: f64,
    pub potential: f64,
    pub bin: Option<usize>,
    force: Option<f64>,
}

impl ChainState {
    pub fn new(target: &dyn TargetModel, coord: &ReactionCoordinate, x: Vec<f64>) -> Result<Self, SamplerError> {
        let potential = target.potential(&x)?;
        if !potential.is_finite() {
            return Err(SamplerError::NonFinite {
                iter: 0,
                value: potential,
                state: x,
            });
        }
        let xi = coord.value(&x, potential);
        Ok(Self {
            bin: coord.spec.bin_index(xi),
            x,
            xi,
            potential,
            force: None,
        })
    }

    fn force(&mut self, target: &dyn TargetModel, index: usize) -> Result<f64, SamplerError> {
        match self.force {
            Some(f) => Ok(f),
            None => {
                let f = target.partial(&self.x, index)?;
                self.force = Some(f);
                Ok(f)
            }
        }
    }
}

/// One Metropolis–Hastings step against `exp(-V + A(ξ))`.
///
/// `bias` returns the bias at a coordinate value, or `None` when that value
/// is not allowed (truncation); such proposals are rejected, as are
/// proposals outside the target's support.
#[allow(clippy::too_many_arguments)]
pub fn mh_step<R: Rng>(
    target: &dyn TargetModel,
    coord: &ReactionCoordinate,
    kernel: &ProposalKernel,
    state: &mut ChainState,
    bias: &dyn Fn(f64) -> Option<f64>,
    proposal: &mut Vec<f64>,
    rng: &mut R,
    iter: u64,
) -> Result<bool, SamplerError> {
    kernel.propose(&state.x, proposal, rng);
    if !target.in_support(proposal) {
        return Ok(false);
    }
    let (xi_new, bias_new, v_new) = match coord.projection {
        Some(i) => {
            let xi = proposal[i];
            let Some(b) = bias(xi) else { return Ok(false) };
            (xi, b, target.potential(proposal))
        }
        None => {
            let v = target.potential(proposal);
            let xi = *v.as_ref().unwrap_or(&f64::NAN);
            let Some(b) = bias(xi) else { return Ok(false) };
            (xi, b, v)
        }
    };
    let v_new = match v_new {
        Ok(v) => v,
        Err(ModelError::OutOfSupport) => return Ok(false),
        Err(e) => return Err(e.into()),
    };
    if !v_new.is_finite() {
        return Err(SamplerError::NonFinite {
            iter,
            value: v_new,
            state: proposal.clone(),
        });
    }
    let bias_old = bias(state.xi).unwrap_or(0.0);
    let delta = (v_new - bias_new) - (state.potential - bias_old);
    let accept = delta <= 0.0 || rng.random::<f64>() < (-delta).exp();
    if accept {
        std::mem::swap(&mut state.x, proposal);
        state.xi = xi_new;
        state.potential = v_new;
        state.bin = coord.spec.bin_index(xi_new);
        state.force = None;
    }
    Ok(accept)
}

/// Deterministic per-chain generator: one ChaCha stream per chain index.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub total_iters: u64,
    pub check_interval: u64,
    pub epsilon_stop: f64,
    pub seed: u64,
    /// Trace stride for the adaptive phase; 0 keeps no trace.
    pub thin: u64,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.check_interval == 0 || self.total_iters < self.check_interval {
            return Err(SamplerError::Config(format!(
                "need total iterations ({}) >= check interval ({}) >= 1",
                self.total_iters, self.check_interval
            )));
        }
        if self.epsilon_stop.is_nan() || self.epsilon_stop <= 0.0 {
            return Err(SamplerError::Config("epsilon_stop must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub grid: BiasGrid,
    pub profile: BiasProfile,
    pub trace: ChainTrace,
    pub convergence: Vec<ConvergenceEntry>,
    pub iterations: u64,
    pub accepted: u64,
    pub converged: bool,
}

/// `δ = min_c ‖A_now − A_prev − c‖` (optimal `c` is the difference of the
/// means) and `ε = δ / ‖A_now‖`.
pub fn convergence_distance(now: &[f64], prev: &[f64]) -> Result<(f64, f64), SamplerError> {
    if now.len() != prev.len() {
        return Err(SamplerError::LengthMismatch(now.len(), prev.len()));
    }
    let diff: Vec<f64> = now.iter().zip(prev).map(|(a, b)| a - b).collect();
    let delta = if diff.iter().all(|&d| d == diff[0]) {
        0.0
    } else {
        let c = diff.iter().sum::<f64>() / diff.len() as f64;
        diff.iter().map(|d| (d - c) * (d - c)).sum::<f64>().sqrt()
    };
    let norm = now.iter().map(|a| a * a).sum::<f64>().sqrt();
    let epsilon = if norm == 0.0 {
        if delta == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        delta / norm
    };
    Ok((delta, epsilon))
}

/// Starting state inside the truncation interval. Projection coordinates are
/// moved to the nearest inner bin midpoint when needed; for the potential an
/// unbiased chain is run until it enters the interval.
pub fn initial_state<R: Rng>(
    target: &dyn TargetModel,
    coord: &ReactionCoordinate,
    kernel: &ProposalKernel,
    rng: &mut R,
    max_burn: u64,
) -> Result<ChainState, SamplerError> {
    let spec = coord.spec;
    let mut x = target.initial_state(rng);
    if let Some(i) = coord.projection {
        let half = 0.5 * spec.delta_z();
        if spec.bin_index(x[i]).is_none() {
            let v = x[i].clamp(spec.z_min + half, spec.z_max - half);
            target.set_coordinate(&mut x, i, v);
        }
        let state = ChainState::new(target, coord, x)?;
        if state.bin.is_none() {
            return Err(SamplerError::InitialState(format!("{} = {}", spec.kind, state.xi)));
        }
        return Ok(state);
    }
    let mut state = ChainState::new(target, coord, x)?;
    let mut buf = Vec::with_capacity(state.x.len());
    let free = |_: f64| Some(0.0);
    let mut t = 0;
    while state.bin.is_none() {
        if t >= max_burn {
            return Err(SamplerError::InitialState(format!(
                "potential still at {} after {max_burn} unbiased steps, interval [{}, {}]",
                state.potential, spec.z_min, spec.z_max
            )));
        }
        t += 1;
        mh_step(target, coord, kernel, &mut state, &free, &mut buf, rng, t)?;
    }
    Ok(state)
}

const BURN_LIMIT: u64 = 10_000_000;
const CACHE_CHECK_EVERY: u64 = 10_000;

fn check_cache(target: &dyn TargetModel, state: &ChainState, iter: u64) -> Result<(), SamplerError> {
    let fresh = target.potential(&state.x)?;
    if fresh.to_bits() != state.potential.to_bits() {
        return Err(SamplerError::CacheMismatch { iter });
    }
    Ok(())
}

/// Adaptive phase: MH against the running bias with truncation, recording
/// into the grid at the post-decision state every iteration and checking
/// convergence every `check_interval` iterations.
pub fn adapt_run(
    target: &dyn TargetModel,
    spec: ReactionCoordinateSpec,
    scheme: Scheme,
    kernel: &ProposalKernel,
    config: &AdaptConfig,
) -> Result<AdaptOutcome, SamplerError> {
    spec.validate()?;
    config.validate()?;
    if scheme == Scheme::Abf && spec.kind == CoordinateKind::NegLogPost {
        return Err(SamplerError::Config(
            "the ABF scheme needs an analytic mean force, which the potential coordinate lacks; use ABP".into(),
        ));
    }
    if kernel.scales.len() != target.dimension() {
        return Err(SamplerError::Config("proposal kernel dimension mismatch".into()));
    }
    let coord = spec.resolve(target)?;
    let mut rng = chain_rng(config.seed, 0);
    let mut state = initial_state(target, &coord, kernel, &mut rng, BURN_LIMIT)?;
    let mut grid = BiasGrid::new(spec, scheme);
    let mut trace = ChainTrace::new(target.coordinate_names(), None);
    let mut convergence = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    let mut buf = Vec::with_capacity(target.dimension());
    let mut accepted = 0;
    let mut converged = false;
    let mut t = 0;
    while t < config.total_iters {
        t += 1;
        let ok = {
            let g = &grid;
            let bias = |z: f64| spec.bin_index(z).map(|b| g.live_bias(b));
            mh_step(target, &coord, kernel, &mut state, &bias, &mut buf, &mut rng, t)?
        };
        accepted += u64::from(ok);
        let bin = state.bin.expect("truncation keeps the chain inside the interval");
        match scheme {
            Scheme::Abf => {
                let index = coord.projection.expect("ABF requires a projection coordinate");
                let f = state.force(target, index)?;
                grid.abf_record(bin, f);
            }
            Scheme::Abp => {
                let a = grid.normalized_bias(bin);
                grid.abp_record(bin, a);
            }
        }
        if config.thin > 0 && t % config.thin == 0 {
            trace.records.push(TraceRecord {
                iter: t,
                xi: state.xi,
                potential: state.potential,
                bias: grid.live_bias(bin),
                x: state.x.clone(),
            });
        }
        if cfg!(debug_assertions) && t % CACHE_CHECK_EVERY == 0 {
            check_cache(target, &state, t)?;
        }
        if t % config.check_interval == 0 {
            let now = grid.profile();
            if let Some(prev) = &previous {
                let (delta, epsilon) = convergence_distance(&now, prev)?;
                convergence.push(ConvergenceEntry {
                    iter: t,
                    delta,
                    epsilon,
                });
                if epsilon < config.epsilon_stop {
                    converged = true;
                    break;
                }
            }
            previous = Some(now);
        }
    }
    Ok(AdaptOutcome {
        profile: grid.freeze(),
        grid,
        trace,
        convergence,
        iterations: t,
        accepted,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub t_max: u64,
    pub thin: u64,
    pub seed: u64,
    pub chain: u64,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub trace: ChainTrace,
    pub accepted: u64,
    pub iterations: u64,
}

impl SampleOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.iterations.max(1) as f64
    }
}

/// Sampling phase: MH against `exp(-V + Â(ξ))` on the whole support with the
/// frozen profile extended by constants; every `thin`-th state is recorded.
pub fn sample_run(
    target: &dyn TargetModel,
    profile: &BiasProfile,
    kernel: &ProposalKernel,
    config: &SampleConfig,
) -> Result<SampleOutcome, SamplerError> {
    if config.thin == 0 {
        return Err(SamplerError::Config("thin must be at least 1".into()));
    }
    if kernel.scales.len() != target.dimension() {
        return Err(SamplerError::Config("proposal kernel dimension mismatch".into()));
    }
    let coord = profile.spec.resolve(target)?;
    let mut rng = chain_rng(config.seed, config.chain);
    let mut x = target.initial_state(&mut rng);
    if let Some(i) = coord.projection {
        let (lo, hi) = (profile.spec.z_min, profile.spec.z_max);
        if !(lo..=hi).contains(&x[i]) {
            let v = x[i].clamp(lo, hi);
            target.set_coordinate(&mut x, i, v);
        }
    }
    let mut state = ChainState::new(target, &coord, x)?;
    let mut trace = ChainTrace::new(target.coordinate_names(), Some(profile.checksum()));
    let mut buf = Vec::with_capacity(target.dimension());
    let bias = |z: f64| Some(profile.bias_at(z));
    let mut accepted = 0;
    for t in 1..=config.t_max {
        accepted += u64::from(mh_step(
            target, &coord, kernel, &mut state, &bias, &mut buf, &mut rng, t,
        )?);
        if t % config.thin == 0 {
            trace.records.push(TraceRecord {
                iter: t,
                xi: state.xi,
                potential: state.potential,
                bias: profile.bias_at(state.xi),
                x: state.x.clone(),
            });
        }
        if cfg!(debug_assertions) && t % CACHE_CHECK_EVERY == 0 {
            check_cache(target, &state, t)?;
        }
    }
    Ok(SampleOutcome {
        trace,
        accepted,
        iterations: config.t_max,
    })
}
