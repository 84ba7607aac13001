use std::ops::Range;

use libm::lgamma;
use rand::RngCore;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::{ModelError, Observations, TargetModel};
use crate::reaction::CoordinateKind;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Hyperparameters of the symmetric mixture prior:
/// `μ_k ~ N(m, 1/κ)`, `λ_k ~ Gamma(α, β)`, `β ~ Gamma(g, h)`,
/// weights uniform on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub k: usize,
    pub m: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub g: f64,
    pub h: f64,
}

impl PriorConfig {
    pub fn new(k: usize, m: f64, kappa: f64, alpha: f64, g: f64, h: f64) -> Result<Self, ModelError> {
        let prior = Self {
            k,
            m,
            kappa,
            alpha,
            g,
            h,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k == 0 {
            return Err(ModelError::InvalidPrior("K must be at least 1".into()));
        }
        if !self.m.is_finite() {
            return Err(ModelError::InvalidPrior("m must be finite".into()));
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("alpha", self.alpha),
            ("g", self.g),
            ("h", self.h),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidPrior(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Same hyperparameters with a different number of components.
    pub fn with_components(&self, k: usize) -> Result<Self, ModelError> {
        Self::new(k, self.m, self.kappa, self.alpha, self.g, self.h)
    }
}

/// Data-dependent default: `m = M`, `κ = 4/R²`, `α = 2`, `g = 0.2`,
/// `h = 100·g/(α·R²)`.
pub fn default_prior(obs: &Observations, k: usize) -> Result<PriorConfig, ModelError> {
    let r = obs.range();
    if r <= 0.0 {
        return Err(ModelError::DegenerateData);
    }
    let alpha = 2.0;
    let g = 0.2;
    PriorConfig::new(k, obs.mean(), 4.0 / (r * r), alpha, g, 100.0 * g / (alpha * r * r))
}

/// Position of each parameter block in the flat state vector
/// `(q_1..q_{K-1}, μ_1..μ_K, λ_1..λ_K, β)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixtureLayout {
    k: usize,
}

impl MixtureLayout {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "a mixture needs at least one component");
        Self { k }
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn dimension(&self) -> usize {
        3 * self.k
    }

    pub fn q_range(&self) -> Range<usize> {
        0..self.k - 1
    }

    pub fn mu_range(&self) -> Range<usize> {
        self.k - 1..2 * self.k - 1
    }

    pub fn lambda_range(&self) -> Range<usize> {
        2 * self.k - 1..3 * self.k - 1
    }

    pub fn beta_index(&self) -> usize {
        3 * self.k - 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dimension());
        names.extend((1..self.k).map(|i| format!("q{i}")));
        names.extend((1..=self.k).map(|i| format!("mu{i}")));
        names.extend((1..=self.k).map(|i| format!("lambda{i}")));
        names.push("beta".into());
        names
    }
}

/// Borrowed mixture parameters; `q` holds the `K-1` free weights.
#[derive(Debug, Clone, Copy)]
pub struct ThetaView<'a> {
    pub q: &'a [f64],
    pub mu: &'a [f64],
    pub lambda: &'a [f64],
    pub beta: f64,
}

impl<'a> ThetaView<'a> {
    pub fn from_flat(layout: MixtureLayout, x: &'a [f64]) -> Result<Self, ModelError> {
        if x.len() != layout.dimension() {
            return Err(ModelError::Shape(format!(
                "expected {} parameters for K={}, got {}",
                layout.dimension(),
                layout.components(),
                x.len()
            )));
        }
        Ok(Self {
            q: &x[layout.q_range()],
            mu: &x[layout.mu_range()],
            lambda: &x[layout.lambda_range()],
            beta: x[layout.beta_index()],
        })
    }

    pub fn components(&self) -> usize {
        self.mu.len()
    }

    /// All `K` weights, the last one implied by the simplex constraint.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.q.to_vec();
        w.push(1.0 - self.q.iter().sum::<f64>());
        w
    }

    pub fn in_support(&self) -> bool {
        let q_sum: f64 = self.q.iter().sum();
        self.q.iter().all(|&q| q >= 0.0 && q.is_finite())
            && q_sum <= 1.0
            && self.mu.iter().all(|m| m.is_finite())
            && self.lambda.iter().all(|&l| l > 0.0 && l.is_finite())
            && self.beta > 0.0
            && self.beta.is_finite()
    }
}

/// Owned mixture parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub q: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: f64,
}

impl Theta {
    pub fn new(q: Vec<f64>, mu: Vec<f64>, lambda: Vec<f64>, beta: f64) -> Result<Self, ModelError> {
        if mu.is_empty() || lambda.len() != mu.len() || q.len() + 1 != mu.len() {
            return Err(ModelError::Shape(format!(
                "inconsistent block sizes: {} weights, {} means, {} precisions",
                q.len(),
                mu.len(),
                lambda.len()
            )));
        }
        Ok(Self { q, mu, lambda, beta })
    }

    /// Builds from all `K` weights, dropping the last (implied) one.
    pub fn from_weights(weights: &[f64], mu: Vec<f64>, lambda: Vec<f64>, beta: f64) -> Result<Self, ModelError> {
        let q = weights[..weights.len().saturating_sub(1)].to_vec();
        Self::new(q, mu, lambda, beta)
    }

    pub fn from_flat(k: usize, x: &[f64]) -> Result<Self, ModelError> {
        let v = ThetaView::from_flat(MixtureLayout::new(k), x)?;
        Ok(Self {
            q: v.q.to_vec(),
            mu: v.mu.to_vec(),
            lambda: v.lambda.to_vec(),
            beta: v.beta,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 * self.mu.len());
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.mu);
        x.extend_from_slice(&self.lambda);
        x.push(self.beta);
        x
    }

    pub fn view(&self) -> ThetaView<'_> {
        ThetaView {
            q: &self.q,
            mu: &self.mu,
            lambda: &self.lambda,
            beta: self.beta,
        }
    }

    pub fn components(&self) -> usize {
        self.mu.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.view().weights()
    }

    pub fn in_support(&self) -> bool {
        self.view().in_support()
    }

    /// Relabels components: component `i` of the result is component
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Theta {
        let w = self.weights();
        let weights: Vec<f64> = perm.iter().map(|&j| w[j]).collect();
        let mu = perm.iter().map(|&j| self.mu[j]).collect();
        let lambda = perm.iter().map(|&j| self.lambda[j]).collect();
        Theta::from_weights(&weights, mu, lambda, self.beta).expect("permutation keeps shapes")
    }

    /// The `K-1` component parameter obtained by deleting component `k` and
    /// renormalizing the remaining weights by `1 - q_k`. `None` when `K = 1`
    /// or `q_k = 1`.
    pub fn without_component(&self, k: usize) -> Option<Theta> {
        let kk = self.components();
        if kk < 2 || k >= kk {
            return None;
        }
        let w = self.weights();
        let rest = 1.0 - w[k];
        if rest <= 0.0 {
            return None;
        }
        let keep = |j: &usize| *j != k;
        let weights: Vec<f64> = (0..kk).filter(keep).map(|j| w[j] / rest).collect();
        let mu = (0..kk).filter(keep).map(|j| self.mu[j]).collect();
        let lambda = (0..kk).filter(keep).map(|j| self.lambda[j]).collect();
        Some(Theta::from_weights(&weights, mu, lambda, self.beta).expect("shapes agree"))
    }
}

/// `log p(y | θ)` for mixture weights `weights` (all `K` of them), computed
/// per observation with a max-shifted log-sum-exp over components.
pub fn log_likelihood(weights: &[f64], mu: &[f64], lambda: &[f64], obs: &Observations) -> f64 {
    let coef: Vec<f64> = weights
        .iter()
        .zip(lambda)
        .map(|(&w, &l)| w.ln() + 0.5 * l.ln())
        .collect();
    let mut terms = vec![0.0; mu.len()];
    let mut total = -0.5 * LN_2PI * obs.len() as f64;
    for &y in obs.values() {
        let mut max = f64::NEG_INFINITY;
        for (k, t) in terms.iter_mut().enumerate() {
            let d = y - mu[k];
            *t = coef[k] - 0.5 * lambda[k] * d * d;
            max = max.max(*t);
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let s: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        total += max + s.ln();
    }
    total
}

fn log_prior(v: &ThetaView<'_>, prior: &PriorConfig) -> f64 {
    let k = v.components() as f64;
    let ln_beta = v.beta.ln();
    let sq: f64 = v.mu.iter().map(|&m| (m - prior.m) * (m - prior.m)).sum();
    let ln_lambda: f64 = v.lambda.iter().map(|l| l.ln()).sum();
    let sum_lambda: f64 = v.lambda.iter().sum();
    let means = 0.5 * k * (prior.kappa.ln() - LN_2PI) - 0.5 * prior.kappa * sq;
    let precisions =
        k * (prior.alpha * ln_beta - lgamma(prior.alpha)) + (prior.alpha - 1.0) * ln_lambda - v.beta * sum_lambda;
    let hyper = prior.g * prior.h.ln() - lgamma(prior.g) + (prior.g - 1.0) * ln_beta - prior.h * v.beta;
    // uniform Dirichlet density on the simplex is Γ(K)
    let weights = lgamma(k);
    means + precisions + hyper + weights
}

fn check_shape(v: &ThetaView<'_>, prior: &PriorConfig) -> Result<(), ModelError> {
    if v.components() != prior.k {
        return Err(ModelError::Shape(format!(
            "parameter has {} components, prior expects {}",
            v.components(),
            prior.k
        )));
    }
    Ok(())
}

fn potential_view(v: &ThetaView<'_>, obs: &Observations, prior: &PriorConfig) -> Result<f64, ModelError> {
    check_shape(v, prior)?;
    if !v.in_support() {
        return Err(ModelError::OutOfSupport);
    }
    let ll = log_likelihood(&v.weights(), v.mu, v.lambda, obs);
    Ok(-(log_prior(v, prior) + ll))
}

/// `V(θ) = -log{p(θ) p(y|θ)}` with the prior and likelihood fully normalized;
/// the posterior is `exp(-V)/Z_K`.
pub fn log_posterior_potential(theta: &Theta, obs: &Observations, prior: &PriorConfig) -> Result<f64, ModelError> {
    potential_view(&theta.view(), obs, prior)
}

fn partial_view(
    v: &ThetaView<'_>,
    coord: CoordinateKind,
    obs: &Observations,
    prior: &PriorConfig,
) -> Result<f64, ModelError> {
    check_shape(v, prior)?;
    if !v.in_support() {
        return Err(ModelError::OutOfSupport);
    }
    let kk = v.components();
    match coord {
        CoordinateKind::Beta => {
            let sum_lambda: f64 = v.lambda.iter().sum();
            Ok(prior.h + sum_lambda - (kk as f64 * prior.alpha + prior.g - 1.0) / v.beta)
        }
        CoordinateKind::Q1 if kk >= 2 => {
            let w = v.weights();
            let mut grad = 0.0;
            for_each_density_ratio(&w, v.mu, v.lambda, obs, |_, ratios| {
                grad -= ratios[0] - ratios[kk - 1];
            });
            Ok(grad)
        }
        CoordinateKind::Mu1 => {
            let w = v.weights();
            let (q1, mu1, l1) = (w[0], v.mu[0], v.lambda[0]);
            let mut grad = prior.kappa * (mu1 - prior.m);
            for_each_density_ratio(&w, v.mu, v.lambda, obs, |y, ratios| {
                grad -= q1 * l1 * (y - mu1) * ratios[0];
            });
            Ok(grad)
        }
        other => Err(ModelError::UnknownCoordinate(other.to_string())),
    }
}

/// Calls `f(y_i, r)` with `r_k = φ(y_i; μ_k, 1/λ_k) / p(y_i | θ)` for every
/// observation, all in log space.
fn for_each_density_ratio(
    weights: &[f64],
    mu: &[f64],
    lambda: &[f64],
    obs: &Observations,
    mut f: impl FnMut(f64, &[f64]),
) {
    let kk = mu.len();
    let half_ln_lambda: Vec<f64> = lambda.iter().map(|l| 0.5 * l.ln()).collect();
    let ln_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut log_phi = vec![0.0; kk];
    let mut ratios = vec![0.0; kk];
    for &y in obs.values() {
        let mut max = f64::NEG_INFINITY;
        for k in 0..kk {
            let d = y - mu[k];
            log_phi[k] = half_ln_lambda[k] - 0.5 * lambda[k] * d * d;
            max = max.max(ln_w[k] + log_phi[k]);
        }
        let s: f64 = (0..kk).map(|k| (ln_w[k] + log_phi[k] - max).exp()).sum();
        let log_p = max + s.ln();
        for k in 0..kk {
            ratios[k] = (log_phi[k] - log_p).exp();
        }
        f(y, &ratios);
    }
}

/// Analytic `∂V/∂ξ` for the single-parameter coordinates `beta`, `q1`, `mu1`.
pub fn partial_potential(
    theta: &Theta,
    coord: CoordinateKind,
    obs: &Observations,
    prior: &PriorConfig,
) -> Result<f64, ModelError> {
    partial_view(&theta.view(), coord, obs, prior)
}

/// The mixture posterior as a [`TargetModel`] on the flat layout.
#[derive(Debug, Clone)]
pub struct MixturePosterior {
    obs: Observations,
    prior: PriorConfig,
    layout: MixtureLayout,
    /// Parameter-free part of `log p(θ) + log p(y|θ)`.
    constant: f64,
}

/// Largest `K` handled by the allocation-free potential.
const STACK_K: usize = 16;

impl MixturePosterior {
    pub fn new(obs: Observations, prior: PriorConfig) -> Result<Self, ModelError> {
        prior.validate()?;
        let layout = MixtureLayout::new(prior.k);
        let k = prior.k as f64;
        let constant = 0.5 * k * (prior.kappa.ln() - LN_2PI) - k * lgamma(prior.alpha) + prior.g * prior.h.ln()
            - lgamma(prior.g)
            + lgamma(k)
            - 0.5 * LN_2PI * obs.len() as f64;
        Ok(Self {
            obs,
            prior,
            layout,
            constant,
        })
    }

    /// Same value as [`log_posterior_potential`], without allocating and with
    /// the constant terms precomputed. Used on every sampler step.
    #[allow(clippy::needless_range_loop)]
    fn potential_fast(&self, v: &ThetaView<'_>) -> Result<f64, ModelError> {
        let kk = v.components();
        if !v.in_support() {
            return Err(ModelError::OutOfSupport);
        }
        let p = &self.prior;
        let mut coef = [0.0; STACK_K];
        let q_last = 1.0 - v.q.iter().sum::<f64>();
        let (mut sq, mut ln_lambda, mut sum_lambda) = (0.0, 0.0, 0.0);
        for k in 0..kk {
            let w = if k + 1 < kk { v.q[k] } else { q_last };
            let ll = v.lambda[k].ln();
            coef[k] = w.ln() + 0.5 * ll;
            let d = v.mu[k] - p.m;
            sq += d * d;
            ln_lambda += ll;
            sum_lambda += v.lambda[k];
        }
        let ln_beta = v.beta.ln();
        let mut total =
            self.constant - 0.5 * p.kappa * sq + kk as f64 * p.alpha * ln_beta + (p.alpha - 1.0) * ln_lambda
                - v.beta * sum_lambda
                + (p.g - 1.0) * ln_beta
                - p.h * v.beta;
        let mut terms = [0.0; STACK_K];
        for &y in self.obs.values() {
            let (mut max, mut arg) = (f64::NEG_INFINITY, 0);
            for k in 0..kk {
                let d = y - v.mu[k];
                terms[k] = coef[k] - 0.5 * v.lambda[k] * d * d;
                if terms[k] > max {
                    (max, arg) = (terms[k], k);
                }
            }
            if max == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            // the largest term contributes exactly 1
            let rest: f64 = (0..kk).filter(|&k| k != arg).map(|k| (terms[k] - max).exp()).sum();
            total += max + rest.ln_1p();
        }
        Ok(-total)
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn layout(&self) -> MixtureLayout {
        self.layout
    }

    pub fn components(&self) -> usize {
        self.prior.k
    }

    pub fn view<'a>(&self, x: &'a [f64]) -> Result<ThetaView<'a>, ModelError> {
        ThetaView::from_flat(self.layout, x)
    }

    /// `log p(y | θ)` for a flat state.
    pub fn log_likelihood_flat(&self, x: &[f64]) -> Result<f64, ModelError> {
        let v = self.view(x)?;
        Ok(log_likelihood(&v.weights(), v.mu, v.lambda, &self.obs))
    }

    pub fn log_likelihood_theta(&self, theta: &Theta) -> f64 {
        log_likelihood(&theta.weights(), &theta.mu, &theta.lambda, &self.obs)
    }

    fn kind_for_index(&self, index: usize) -> Option<CoordinateKind> {
        if index == self.layout.beta_index() {
            Some(CoordinateKind::Beta)
        } else if self.layout.components() >= 2 && index == 0 {
            Some(CoordinateKind::Q1)
        } else if index == self.layout.mu_range().start {
            Some(CoordinateKind::Mu1)
        } else {
            None
        }
    }
}

impl TargetModel for MixturePosterior {
    fn dimension(&self) -> usize {
        self.layout.dimension()
    }

    fn coordinate_names(&self) -> Vec<String> {
        self.layout.names()
    }

    fn in_support(&self, x: &[f64]) -> bool {
        self.view(x).map(|v| v.in_support()).unwrap_or(false)
    }

    fn potential(&self, x: &[f64]) -> Result<f64, ModelError> {
        let v = self.view(x)?;
        if v.components() > STACK_K {
            return potential_view(&v, &self.obs, &self.prior);
        }
        self.potential_fast(&v)
    }

    fn partial(&self, x: &[f64], index: usize) -> Result<f64, ModelError> {
        let kind = self
            .kind_for_index(index)
            .ok_or_else(|| ModelError::UnknownCoordinate(format!("state index {index}")))?;
        partial_view(&self.view(x)?, kind, &self.obs, &self.prior)
    }

    fn projection_index(&self, kind: CoordinateKind) -> Option<usize> {
        match kind {
            CoordinateKind::Beta => Some(self.layout.beta_index()),
            CoordinateKind::Q1 if self.layout.components() >= 2 => Some(0),
            CoordinateKind::Mu1 => Some(self.layout.mu_range().start),
            _ => None,
        }
    }

    /// Weights drawn uniformly on the simplex, means at evenly spaced data
    /// quantiles, `β` at its prior mean `g/h` and precisions at `α/β`.
    fn initial_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let k = self.layout.components();
        let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let beta = self.prior.g / self.prior.h;
        let mut x = Vec::with_capacity(self.dimension());
        x.extend(draws[..k - 1].iter().map(|d| d / total));
        x.extend((0..k).map(|i| self.obs.quantile((i as f64 + 0.5) / k as f64)));
        x.extend(std::iter::repeat_n(self.prior.alpha / beta, k));
        x.push(beta);
        x
    }

    fn set_coordinate(&self, x: &mut [f64], index: usize, value: f64) {
        if self.layout.components() >= 2 && index == 0 {
            let q = &mut x[self.layout.q_range()];
            let others = 1.0 - q[0];
            let target = (1.0 - value).max(0.0);
            let k = self.layout.components();
            for qj in q.iter_mut().skip(1) {
                *qj = if others > 0.0 {
                    *qj * target / others
                } else {
                    target / (k - 1) as f64
                };
            }
            q[0] = value;
        } else {
            x[index] = value;
        }
    }
}
