//! Importance reweighting from the biased to the true posterior, efficiency
//! factors, evidence ratios by component removal, and chain diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias::BiasProfile;
use crate::model::{MixturePosterior, Theta};
use crate::reaction::ReactionCoordinateSpec;
use crate::trace::{ChainTrace, TraceRecord};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("trace was produced against bias profile {trace} but profile {profile} was supplied")]
    ProfileMismatch { trace: String, profile: String },
    #[error("empty sample")]
    Empty,
    #[error("weights sum to zero")]
    ZeroWeight,
    #[error("evidence ratio needs K >= 2 components, got {0}")]
    TooFewComponents(usize),
    #[error("trace state has {found} columns, a K={k} mixture needs {expected}")]
    Shape { k: usize, expected: usize, found: usize },
}

fn log_mean_exp(values: impl Iterator<Item = f64> + Clone) -> (f64, usize) {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut n = 0;
    let s: f64 = values
        .map(|v| {
            n += 1;
            (v - max).exp()
        })
        .sum();
    (max + (s / n as f64).ln(), n)
}

/// A trace together with its importance weights `w = exp(-Â(ξ))`.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub trace: ChainTrace,
    /// `log w_t = -Â(ξ_t)`.
    pub log_weights: Vec<f64>,
}

impl WeightedSample {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Weights `exp(-Â(ξ))` as stored.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Weights rescaled so the largest is 1.
    pub fn scaled_weights(&self) -> Vec<f64> {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.log_weights.iter().map(|l| (l - max).exp()).collect()
    }
}

/// Attaches importance weights to a trace run against `profile`. The stored
/// per-record bias is used when the trace carries the profile's checksum;
/// a trace without checksum has its biases recomputed from `ξ`.
pub fn reweight(trace: &ChainTrace, profile: &BiasProfile) -> Result<WeightedSample, EstimatorError> {
    let sum = profile.checksum();
    let log_weights = match &trace.profile_checksum {
        Some(t) if *t != sum => {
            return Err(EstimatorError::ProfileMismatch {
                trace: t.clone(),
                profile: sum,
            })
        }
        Some(_) => trace.records.iter().map(|r| -r.bias).collect(),
        None => trace.records.iter().map(|r| -profile.bias_at(r.xi)).collect(),
    };
    Ok(WeightedSample {
        trace: trace.clone(),
        log_weights,
    })
}

/// Self-normalized estimate `Σ h w / Σ w`.
pub fn expectation(ws: &WeightedSample, h: impl Fn(&TraceRecord) -> f64) -> Result<f64, EstimatorError> {
    ratio_estimate(&ws.trace.records, &ws.scaled_weights(), &h)
}

fn ratio_estimate(
    records: &[TraceRecord],
    weights: &[f64],
    h: &impl Fn(&TraceRecord) -> f64,
) -> Result<f64, EstimatorError> {
    if records.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let (num, den) = records
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(n, d), (r, &w)| (n + w * h(r), d + w));
    if den <= 0.0 {
        return Err(EstimatorError::ZeroWeight);
    }
    Ok(num / den)
}

/// Default number of batches for batch-means errors.
pub const BATCHES: usize = 20;

/// Self-normalized estimate with a batch-means standard error over
/// `batches` contiguous blocks.
pub fn expectation_with_error(
    ws: &WeightedSample,
    h: impl Fn(&TraceRecord) -> f64,
    batches: usize,
) -> Result<(f64, f64), EstimatorError> {
    let w = ws.scaled_weights();
    let records = &ws.trace.records;
    let estimate = ratio_estimate(records, &w, &h)?;
    let b = batches.max(2).min(records.len());
    if b < 2 {
        return Ok((estimate, f64::NAN));
    }
    let size = records.len() / b;
    let mut means = Vec::with_capacity(b);
    for i in 0..b {
        let range = i * size..(i + 1) * size;
        if let Ok(m) = ratio_estimate(&records[range.clone()], &w[range], &h) {
            means.push(m);
        }
    }
    Ok((estimate, standard_error(&means)))
}

/// `sd / sqrt(n)` with the unbiased variance.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Normalized effective sample size `(Σw)² / (T Σw²)`.
pub fn ef_numerical(weights: &[f64]) -> f64 {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let (s1, s2) = weights.iter().fold((0.0, 0.0), |(a, b), &w| {
        let u = w / max;
        (a + u, b + u * u)
    });
    s1 * s1 / (weights.len() as f64 * s2)
}

/// `log(Z_K / Z_{K-1})` with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub log_ratio: f64,
    pub std_error: f64,
    /// `log Î_K`, `log Î_{K-1}` over the pooled records.
    pub log_i_k: f64,
    pub log_i_k_minus_1: f64,
    /// (record, component) pairs skipped because `q_k = 1`.
    pub excluded: usize,
    pub chains: usize,
    /// `"chains"` or `"batch-means"`.
    pub error_method: String,
}

struct EvidenceTerms {
    /// `log w_t` per record.
    log_w: Vec<f64>,
    /// `log w_{-k}(θ_t)` per record and component, `None` when excluded.
    log_w_minus: Vec<Vec<Option<f64>>>,
}

fn evidence_terms(ws: &WeightedSample, model: &MixturePosterior) -> Result<EvidenceTerms, EstimatorError> {
    let k = model.components();
    let mut log_w_minus = Vec::with_capacity(ws.len());
    for (rec, &lw) in ws.trace.records.iter().zip(&ws.log_weights) {
        let theta = Theta::from_flat(k, &rec.x).map_err(|_| EstimatorError::Shape {
            k,
            expected: 3 * k,
            found: rec.x.len(),
        })?;
        let full = model.log_likelihood_theta(&theta);
        let row = (0..k)
            .map(|c| {
                theta
                    .without_component(c)
                    .map(|reduced| lw + model.log_likelihood_theta(&reduced) - full)
            })
            .collect();
        log_w_minus.push(row);
    }
    Ok(EvidenceTerms {
        log_w: ws.log_weights.clone(),
        log_w_minus,
    })
}

/// `(log Î_K, log Î_{K-1}, excluded)` from a set of records.
fn evidence_from_terms(terms: &[&EvidenceTerms]) -> (f64, f64, usize) {
    let log_ik = log_mean_exp(terms.iter().flat_map(|t| t.log_w.iter().copied())).0;
    let k = terms
        .iter()
        .find_map(|t| t.log_w_minus.first().map(Vec::len))
        .unwrap_or(0);
    let mut excluded = 0;
    let mut per_component = Vec::with_capacity(k);
    for c in 0..k {
        let vals = terms
            .iter()
            .flat_map(|t| t.log_w_minus.iter().filter_map(move |row| row[c]));
        let total: usize = terms.iter().map(|t| t.log_w_minus.len()).sum();
        let (lm, used) = log_mean_exp(vals);
        excluded += total - used;
        if used > 0 {
            per_component.push(lm);
        }
    }
    let log_ikm1 = log_mean_exp(per_component.iter().copied()).0;
    (log_ik, log_ikm1, excluded)
}

/// `log(Î_K / Î_{K-1})` with `Î_K = mean w` and `Î_{K-1}` the average over
/// components `k` of `mean w_{-k}`, where `w_{-k} = w · p(y|θ_{-k})/p(y|θ)`
/// and `θ_{-k}` drops component `k` and renormalizes the other weights.
///
/// The estimate pools all chains. Its standard error is the spread of the
/// per-chain estimates when there are at least two chains, otherwise batch
/// means over [`BATCHES`] blocks of the single chain.
pub fn log_evidence_ratio(
    samples: &[WeightedSample],
    model: &MixturePosterior,
) -> Result<EvidenceEstimate, EstimatorError> {
    if model.components() < 2 {
        return Err(EstimatorError::TooFewComponents(model.components()));
    }
    if samples.iter().all(WeightedSample::is_empty) {
        return Err(EstimatorError::Empty);
    }
    let terms: Vec<EvidenceTerms> = samples
        .iter()
        .map(|ws| evidence_terms(ws, model))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&EvidenceTerms> = terms.iter().collect();
    let (log_i_k, log_i_k_minus_1, excluded) = evidence_from_terms(&refs);

    let (std_error, error_method) = if terms.len() >= 2 {
        let per_chain: Vec<f64> = terms
            .iter()
            .map(|t| {
                let (a, b, _) = evidence_from_terms(&[t]);
                a - b
            })
            .collect();
        (standard_error(&per_chain), "chains")
    } else {
        let t = &terms[0];
        let n = t.log_w.len();
        let b = BATCHES.min(n);
        let size = n / b.max(1);
        let per_batch: Vec<f64> = (0..b)
            .map(|i| {
                let range = i * size..(i + 1) * size;
                let batch = EvidenceTerms {
                    log_w: t.log_w[range.clone()].to_vec(),
                    log_w_minus: t.log_w_minus[range].to_vec(),
                };
                let (a, bb, _) = evidence_from_terms(&[&batch]);
                a - bb
            })
            .collect();
        (standard_error(&per_batch), "batch-means")
    };
    Ok(EvidenceEstimate {
        log_ratio: log_i_k - log_i_k_minus_1,
        std_error,
        log_i_k,
        log_i_k_minus_1,
        excluded,
        chains: samples.len(),
        error_method: error_method.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Consecutive records whose ordering of the means differs.
    pub switch_count: u64,
    /// `max_i |freq_i − 1/N| · N` over in-range records.
    pub xi_uniformity: f64,
    /// Largest distance between the reweighted (mean, sd) of any two `μ_k`.
    pub label_symmetry: Option<f64>,
}

fn mean_columns(trace: &ChainTrace) -> Vec<usize> {
    (1..).map_while(|k| trace.column(&format!("mu{k}"))).collect()
}

fn ordering(x: &[f64], cols: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cols.len()).collect();
    idx.sort_by(|&a, &b| x[cols[a]].total_cmp(&x[cols[b]]));
    idx
}

/// Mode-switching, coordinate-uniformity and label-symmetry statistics.
/// `weights` defaults to uniform.
pub fn diagnostics(trace: &ChainTrace, spec: &ReactionCoordinateSpec, weights: Option<&[f64]>) -> Diagnostics {
    let cols = mean_columns(trace);
    let mut switch_count = 0;
    if cols.len() >= 2 {
        let mut prev: Option<Vec<usize>> = None;
        for r in &trace.records {
            let o = ordering(&r.x, &cols);
            if prev.as_ref().is_some_and(|p| *p != o) {
                switch_count += 1;
            }
            prev = Some(o);
        }
    }

    let mut hist = vec![0u64; spec.n_bins];
    for r in &trace.records {
        if let Some(b) = spec.bin_index(r.xi) {
            hist[b] += 1;
        }
    }
    let inside: u64 = hist.iter().sum();
    let n = spec.n_bins as f64;
    let xi_uniformity = if inside == 0 {
        f64::NAN
    } else {
        hist.iter()
            .map(|&c| (c as f64 / inside as f64 - 1.0 / n).abs() * n)
            .fold(0.0, f64::max)
    };

    let label_symmetry = (cols.len() >= 2 && !trace.is_empty()).then(|| {
        let uniform;
        let w = match weights {
            Some(w) => w,
            None => {
                uniform = vec![1.0; trace.len()];
                &uniform
            }
        };
        let total: f64 = w.iter().sum();
        let summaries: Vec<(f64, f64)> = cols
            .iter()
            .map(|&c| {
                let m = trace.records.iter().zip(w).map(|(r, wi)| wi * r.x[c]).sum::<f64>() / total;
                let v = trace
                    .records
                    .iter()
                    .zip(w)
                    .map(|(r, wi)| wi * (r.x[c] - m) * (r.x[c] - m))
                    .sum::<f64>()
                    / total;
                (m, v.sqrt())
            })
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..summaries.len() {
            for j in i + 1..summaries.len() {
                let (a, b) = (summaries[i], summaries[j]);
                worst = worst.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
        }
        worst
    });

    Diagnostics {
        switch_count,
        xi_uniformity,
        label_symmetry,
    }
}

/// Everything `report` emits. Maps are ordered so the JSON is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ef_numerical: f64,
    pub ef_theoretical: f64,
    pub records: usize,
    pub acceptance_rate: Option<f64>,
    pub posterior_expectations: BTreeMap<String, f64>,
    pub posterior_std_errors: BTreeMap<String, f64>,
    pub log_evidence_ratios: BTreeMap<String, EvidenceEstimate>,
    pub diagnostics: Diagnostics,
    pub seeds: Vec<u64>,
    pub profile_checksum: String,
    pub config: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_prior, Observations};
    use crate::reaction::CoordinateKind;
    use proptest::prelude::*;

    fn record(iter: u64, xi: f64, bias: f64, x: Vec<f64>) -> TraceRecord {
        TraceRecord {
            iter,
            xi,
            potential: 0.0,
            bias,
            x,
        }
    }

    fn toy_trace(xs: &[f64], biases: &[f64]) -> ChainTrace {
        let mut t = ChainTrace::new(vec!["x0".into()], None);
        for (i, (&x, &b)) in xs.iter().zip(biases).enumerate() {
            t.records.push(record(i as u64, x, b, vec![x]));
        }
        t
    }

    fn spec() -> ReactionCoordinateSpec {
        ReactionCoordinateSpec::new(CoordinateKind::Toy(0), 0.0, 4.0, 4).unwrap()
    }

    #[test]
    fn zero_profile_gives_unit_weights() {
        let t = toy_trace(&[0.5, 1.5, 3.2], &[0.0; 3]);
        let ws = reweight(&t, &BiasProfile::zero(spec())).unwrap();
        assert_eq!(ws.weights(), vec![1.0; 3]);
        assert_eq!(expectation(&ws, |_| 1.0).unwrap(), 1.0);
        assert_eq!(ef_numerical(&ws.weights()), 1.0);
        let mean = expectation(&ws, |r| r.xi).unwrap();
        assert!((mean - (0.5 + 1.5 + 3.2) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn checksum_mismatch_is_rejected() {
        let mut t = toy_trace(&[0.5], &[0.0]);
        t.profile_checksum = Some("0000".into());
        assert!(matches!(
            reweight(&t, &BiasProfile::zero(spec())),
            Err(EstimatorError::ProfileMismatch { .. })
        ));
    }

    #[test]
    fn missing_checksum_recomputes_bias() {
        let p = BiasProfile::new(spec(), vec![0.0, 1.0, 2.0, 3.0]);
        let t = toy_trace(&[0.5, 2.5, 9.0], &[f64::NAN; 3]);
        let ws = reweight(&t, &p).unwrap();
        assert_eq!(ws.log_weights, vec![0.0, -2.0, -3.0]);
    }

    #[test]
    fn ef_limit_case() {
        let ef = ef_numerical(&[1.0, 1.0, 1e-300, 1e-300]);
        assert!((ef - 0.5).abs() < 1e-12);
    }

    #[test]
    fn switch_counts() {
        let names: Vec<String> = ["q1", "mu1", "mu2", "lambda1", "lambda2", "beta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut constant = ChainTrace::new(names.clone(), None);
        let mut alternating = ChainTrace::new(names, None);
        for i in 0..10 {
            constant
                .records
                .push(record(i, 1.0, 0.0, vec![0.5, 0.0, 1.0, 1.0, 1.0, 1.0]));
            let (a, b) = if i % 2 == 0 { (0.0, 1.0) } else { (1.0, 0.0) };
            alternating
                .records
                .push(record(i, 1.0, 0.0, vec![0.5, a, b, 1.0, 1.0, 1.0]));
        }
        let s = spec();
        assert_eq!(diagnostics(&constant, &s, None).switch_count, 0);
        assert_eq!(diagnostics(&alternating, &s, None).switch_count, 9);
        assert_eq!(diagnostics(&alternating, &s, None).label_symmetry, Some(0.0));
        assert!(diagnostics(&constant, &s, None).label_symmetry.unwrap() > 0.9);
    }

    #[test]
    fn uniformity_statistic() {
        let s = spec();
        let flat = toy_trace(&[0.5, 1.5, 2.5, 3.5], &[0.0; 4]);
        assert_eq!(diagnostics(&flat, &s, None).xi_uniformity, 0.0);
        let lumped = toy_trace(&[0.5, 0.6, 2.5, 3.5, 7.0], &[0.0; 5]);
        // bin 0 has 1/2 of the in-range records against 1/4 expected
        assert_eq!(diagnostics(&lumped, &s, None).xi_uniformity, 1.0);
    }

    #[test]
    fn evidence_with_an_empty_component() {
        let obs = Observations::new(vec![-1.0, 0.2, 1.4]).unwrap();
        let prior = default_prior(&obs, 2).unwrap();
        let model = MixturePosterior::new(obs, prior).unwrap();
        let names = model.layout().names();
        let mut t = ChainTrace::new(names, None);
        // q1 = 0: dropping component 1 leaves the likelihood unchanged
        t.records.push(record(1, 0.5, 0.7, vec![0.0, 3.0, 0.1, 1.0, 2.0, 0.5]));
        let ws = WeightedSample {
            trace: t.clone(),
            log_weights: vec![-0.7],
        };
        let terms = evidence_terms(&ws, &model).unwrap();
        assert!((terms.log_w_minus[0][0].unwrap() + 0.7).abs() < 1e-14);
        // dropping component 2 (weight 1) is excluded
        assert_eq!(terms.log_w_minus[0][1], None);
        let est = log_evidence_ratio(&[ws], &model).unwrap();
        assert_eq!(est.excluded, 1);
        assert!(est.log_ratio.abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn estimates_are_scale_and_gauge_invariant(
            xs in proptest::collection::vec(0.0f64..4.0, 2..100),
            a in proptest::collection::vec(0.0f64..8.0, 4),
            shift in -50.0f64..50.0,
        ) {
            let p = BiasProfile::new(spec(), a.clone());
            let q = BiasProfile::new(spec(), a.iter().map(|v| v + shift).collect());
            let t = toy_trace(&xs, &vec![0.0; xs.len()]);
            let wp = reweight(&t, &p).unwrap();
            let wq = reweight(&t, &q).unwrap();
            let ep = expectation(&wp, |r| r.xi).unwrap();
            let eq = expectation(&wq, |r| r.xi).unwrap();
            prop_assert!((ep - eq).abs() <= 1e-12 * ep.abs().max(1.0));
            let fp = ef_numerical(&wp.weights());
            let fq = ef_numerical(&wq.weights());
            prop_assert!((fp - fq).abs() <= 1e-12 * fp);
            prop_assert!(fp > 0.0 && fp <= 1.0 + 1e-15);
            prop_assert_eq!(expectation(&wq, |_| 1.0).unwrap(), 1.0);
        }
    }
}
