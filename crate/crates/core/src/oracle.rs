//! Reference values computed without any sampling: quadrature free energies
//! of toy targets and brute-force marginal likelihoods of tiny mixtures.

use libm::lgamma;

use crate::model::{GaussianMixtureToy, Observations, PriorConfig, TargetModel};
use crate::reaction::ReactionCoordinateSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Points used across the whole interval by [`toy_free_energy`].
pub const FREE_ENERGY_POINTS: usize = 10_000;

fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    debug_assert!(n.is_multiple_of(2) && n >= 2);
    let mut s = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    h * (0.5 * (values[0] + values[n]) + values[1..n].iter().sum::<f64>())
}

/// Marginal density of coordinate `index` at `z`, by trapezoid quadrature of
/// the joint density over the remaining coordinate (2D) or directly (1D).
pub fn toy_marginal_density(toy: &GaussianMixtureToy, index: usize, z: f64, inner_points: usize) -> f64 {
    match toy.dimension() {
        1 => (-toy.potential(&[z]).expect("finite point")).exp(),
        2 => {
            let other = 1 - index;
            let (lo, hi) = toy.support_box(other);
            let h = (hi - lo) / inner_points as f64;
            let vals: Vec<f64> = (0..=inner_points)
                .map(|j| {
                    let mut x = [0.0; 2];
                    x[index] = z;
                    x[other] = lo + j as f64 * h;
                    toy.log_density(&x).exp()
                })
                .collect();
            trapezoid(&vals, h)
        }
        d => panic!("quadrature oracle supports 1D and 2D toys, got {d}D"),
    }
}

/// Bin-averaged free energy `A_i = -log( (1/Δz) ∫_{bin i} p(z) dz )` along
/// the spec's coordinate, with [`FREE_ENERGY_POINTS`] trapezoid nodes over
/// the interval, anchored to minimum 0.
pub fn toy_free_energy(toy: &GaussianMixtureToy, spec: &ReactionCoordinateSpec) -> Vec<f64> {
    let index = match spec.kind {
        crate::reaction::CoordinateKind::Toy(i) => i,
        other => panic!("toy free energy needs a toy coordinate, got {other}"),
    };
    let per_bin = (FREE_ENERGY_POINTS / spec.n_bins).max(2);
    let h = spec.delta_z() / per_bin as f64;
    let mut out: Vec<f64> = (0..spec.n_bins)
        .map(|b| {
            let start = spec.edge(b);
            let vals: Vec<f64> = (0..=per_bin)
                .map(|j| toy_marginal_density(toy, index, start + j as f64 * h, 2000))
                .collect();
            -(trapezoid(&vals, h) / spec.delta_z()).ln()
        })
        .collect();
    let min = out.iter().copied().fold(f64::INFINITY, f64::min);
    out.iter_mut().for_each(|v| *v -= min);
    out
}

/// `max_i |a_i - b_i - c|` with `c` the mean difference.
pub fn mean_aligned_linf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let c = a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y - c).abs()).fold(0.0, f64::max)
}

/// Six well separated points used to check evidence estimates end to end.
pub const EVIDENCE_FIXTURE: [f64; 6] = [-1.9, -2.3, -1.6, 1.8, 2.4, 2.1];

/// Largest `K^n` the brute-force evidence will enumerate.
pub const MAX_ALLOCATIONS: usize = 1 << 20;

const LAMBDA_INTERVALS: usize = 2000;
const BETA_INTERVALS: usize = 800;

/// `log ∫ N(μ; m, 1/κ) Π_{i∈S} N(y_i; μ, 1/λ) dμ` for a subset with `s`
/// points, sum `s1` and sum of squares `s2`.
fn log_mean_integral(s: f64, s1: f64, s2: f64, lambda: f64, prior: &PriorConfig) -> f64 {
    let prec = prior.kappa + s * lambda;
    let b = lambda * s1 + prior.kappa * prior.m;
    0.5 * s * (lambda.ln() - LN_2PI) + 0.5 * (prior.kappa / prec).ln()
        - 0.5 * (lambda * s2 + prior.kappa * prior.m * prior.m - b * b / prec)
}

/// `log G(S; β)`: one component's contribution with its mean integrated in
/// closed form and its precision by Simpson quadrature in `log λ`.
fn log_component(s: f64, s1: f64, s2: f64, beta: f64, prior: &PriorConfig) -> f64 {
    if s == 0.0 {
        return 0.0;
    }
    let center = (prior.alpha / beta).ln();
    let (lo, hi) = (center - 45.0, center + 8.0);
    let h = (hi - lo) / LAMBDA_INTERVALS as f64;
    let log_norm = prior.alpha * beta.ln() - lgamma(prior.alpha);
    let logs: Vec<f64> = (0..=LAMBDA_INTERVALS)
        .map(|j| {
            let u = lo + j as f64 * h;
            let lambda = u.exp();
            log_norm + prior.alpha * u - beta * lambda + log_mean_integral(s, s1, s2, lambda, prior)
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    max + simpson(&vals, h).ln()
}

/// `log Z_K = log ∫ p(θ) p(y|θ) dθ` by summing over all `K^n` allocations:
/// weights integrated exactly (uniform Dirichlet), each component's mean in
/// closed form, its precision and the shared `β` by 1D quadrature. Only for
/// tiny datasets; returns `None` when `K^n` exceeds [`MAX_ALLOCATIONS`].
pub fn brute_force_log_evidence(obs: &Observations, prior: &PriorConfig) -> Option<f64> {
    let y = obs.values();
    let n = y.len();
    let k = prior.k;
    let total = (k as f64).powi(n as i32);
    if total > MAX_ALLOCATIONS as f64 {
        return None;
    }
    let total = total as usize;

    // subset statistics indexed by bitmask
    let n_subsets = 1usize << n;
    let mut stats = vec![(0.0, 0.0, 0.0); n_subsets];
    for (mask, st) in stats.iter_mut().enumerate() {
        for (i, &v) in y.iter().enumerate() {
            if mask & (1 << i) != 0 {
                st.0 += 1.0;
                st.1 += v;
                st.2 += v * v;
            }
        }
    }

    // allocations as (Dirichlet log factor, subset masks)
    let mut allocations = Vec::with_capacity(total);
    for code in 0..total {
        let mut masks = vec![0usize; k];
        let mut c = code;
        for i in 0..n {
            masks[c % k] |= 1 << i;
            c /= k;
        }
        let log_dir = lgamma(k as f64) + masks.iter().map(|m| lgamma(m.count_ones() as f64 + 1.0)).sum::<f64>()
            - lgamma((n + k) as f64);
        allocations.push((log_dir, masks));
    }

    // β = t^{1/g}: the Gamma(g, h) prior becomes h^g/(Γ(g) g) e^{-h t^{1/g}} dt
    let t_max = (60.0 / prior.h).powf(prior.g);
    let ht = t_max / BETA_INTERVALS as f64;
    let log_const = prior.g * prior.h.ln() - lgamma(prior.g) - prior.g.ln();
    let mut logs = Vec::with_capacity(BETA_INTERVALS + 1);
    let mut component = vec![0.0; n_subsets];
    for j in 0..=BETA_INTERVALS {
        let t = j as f64 * ht;
        let beta = t.powf(1.0 / prior.g);
        if beta <= 0.0 || !beta.is_finite() {
            // β = 0 lies outside the λ prior's support; extrapolated below
            logs.push(f64::NAN);
            continue;
        }
        for (mask, c) in component.iter_mut().enumerate() {
            let (s, s1, s2) = stats[mask];
            *c = log_component(s, s1, s2, beta, prior);
        }
        let terms: Vec<f64> = allocations
            .iter()
            .map(|(log_dir, masks)| log_dir + masks.iter().map(|&m| component[m]).sum::<f64>())
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        logs.push(log_const - prior.h * beta + lse);
    }
    // linear extrapolation of the log integrand to t = 0
    if logs[0].is_nan() {
        logs[0] = 2.0 * logs[1] - logs[2];
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    Some(max + simpson(&vals, ht).ln())
}
