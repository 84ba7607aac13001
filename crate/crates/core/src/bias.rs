//! Binned bias state for the adaptive phase and the frozen bias profile used
//! afterwards.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reaction::{ReactionCoordinateSpec, Scheme};

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bias file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("bias file has {found} bins, configuration expects {expected}")]
    BinCount { expected: usize, found: usize },
    #[error("bias file midpoint {found} in row {row} does not match configured {expected}")]
    Midpoint { row: usize, expected: f64, found: f64 },
}

/// Fenwick tree over per-bin mean forces, giving prefix sums in O(log N).
#[derive(Debug, Clone)]
struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(values);
        for i in 1..=n {
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i];
            }
        }
        Self { tree }
    }

    fn add(&mut self, index: usize, delta: f64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum of values `0..=index`.
    fn prefix(&self, index: usize) -> f64 {
        let mut i = index + 1;
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn anchor_min_zero(values: &mut [f64]) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    for v in values {
        *v -= min;
    }
}

/// Trapezoid integration of bin forces between midpoints, `A(mid_0) = 0`.
fn integrate_forces(forces: &[f64], dz: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(forces.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in forces.windows(2) {
        acc += 0.5 * dz * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Running bias `A_t` on the bins of a reaction coordinate.
///
/// ABF keeps per-bin force sums and derives `A_t` by integrating the mean
/// force; unvisited bins have zero force. ABP keeps log accumulators that
/// start at 1 and grow by `exp(-A_j)` of the bin visited at time `j`.
#[derive(Debug, Clone)]
pub struct BiasGrid {
    spec: ReactionCoordinateSpec,
    scheme: Scheme,
    force_sum: Vec<f64>,
    hit_count: Vec<u64>,
    mean_force: Vec<f64>,
    fenwick: Fenwick,
    log_weight: Vec<f64>,
    log_total: f64,
    since_refresh: usize,
}

impl BiasGrid {
    pub fn new(spec: ReactionCoordinateSpec, scheme: Scheme) -> Self {
        let n = spec.n_bins;
        Self {
            spec,
            scheme,
            force_sum: vec![0.0; n],
            hit_count: vec![0; n],
            mean_force: vec![0.0; n],
            fenwick: Fenwick::from_values(&vec![0.0; n]),
            log_weight: vec![0.0; n],
            log_total: (n as f64).ln(),
            since_refresh: 0,
        }
    }

    pub fn spec(&self) -> &ReactionCoordinateSpec {
        &self.spec
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn hit_counts(&self) -> &[u64] {
        &self.hit_count
    }

    pub fn abf_record(&mut self, bin: usize, force: f64) {
        assert_eq!(self.scheme, Scheme::Abf, "force recorded on an ABP grid");
        self.force_sum[bin] += force;
        self.hit_count[bin] += 1;
        let mean = self.force_sum[bin] / self.hit_count[bin] as f64;
        self.fenwick.add(bin, mean - self.mean_force[bin]);
        self.mean_force[bin] = mean;
        self.since_refresh += 1;
        if self.since_refresh >= self.spec.n_bins {
            self.fenwick = Fenwick::from_values(&self.mean_force);
            self.since_refresh = 0;
        }
    }

    /// `F_t` per bin, zero where nothing was recorded.
    pub fn mean_force(&self) -> &[f64] {
        &self.mean_force
    }

    /// Adds `exp(-bias_at_sample)` to the accumulator of `bin`.
    pub fn abp_record(&mut self, bin: usize, bias_at_sample: f64) {
        assert_eq!(self.scheme, Scheme::Abp, "weight recorded on an ABF grid");
        let inc = -bias_at_sample;
        self.log_weight[bin] = log_add(self.log_weight[bin], inc);
        self.hit_count[bin] += 1;
        self.log_total = log_add(self.log_total, inc);
        self.since_refresh += 1;
        if self.since_refresh >= self.spec.n_bins {
            self.log_total = log_sum(&self.log_weight);
            self.since_refresh = 0;
        }
    }

    /// Log of the unnormalized ABP accumulators.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weight
    }

    /// ABP bias of `bin` normalized so that `Δz Σ exp(-A) = 1`.
    pub fn normalized_bias(&self, bin: usize) -> f64 {
        -(self.log_weight[bin] - self.spec.delta_z().ln() - self.log_total)
    }

    /// Current bias of `bin` in an arbitrary but fixed-within-a-step gauge;
    /// only differences between bins are meaningful. O(log N) for ABF, O(1)
    /// for ABP.
    pub fn live_bias(&self, bin: usize) -> f64 {
        match self.scheme {
            Scheme::Abf => {
                let dz = self.spec.delta_z();
                dz * (self.fenwick.prefix(bin) - 0.5 * self.mean_force[0] - 0.5 * self.mean_force[bin])
            }
            Scheme::Abp => self.normalized_bias(bin),
        }
    }

    /// `A_t` at the bin midpoints, anchored so its minimum is 0.
    pub fn profile(&self) -> Vec<f64> {
        let mut values = match self.scheme {
            Scheme::Abf => integrate_forces(&self.mean_force, self.spec.delta_z()),
            Scheme::Abp => self.log_weight.iter().map(|w| -w).collect(),
        };
        anchor_min_zero(&mut values);
        values
    }

    /// ABP profile with the normalization `Δz Σ exp(-A) = 1`, recomputed
    /// exactly from the accumulators.
    pub fn normalized_profile(&self) -> Vec<f64> {
        let log_total = log_sum(&self.log_weight);
        let ln_dz = self.spec.delta_z().ln();
        self.log_weight.iter().map(|w| -(w - ln_dz - log_total)).collect()
    }

    /// Bias at `z` with constant extension outside the interval.
    pub fn bias_at(&self, z: f64) -> f64 {
        self.profile()[clamped_bin(&self.spec, z)]
    }

    pub fn freeze(&self) -> BiasProfile {
        BiasProfile {
            spec: self.spec,
            values: self.profile(),
        }
    }
}

fn clamped_bin(spec: &ReactionCoordinateSpec, z: f64) -> usize {
    match spec.bin_index(z) {
        Some(i) => i,
        None if z > spec.z_max => spec.n_bins - 1,
        None => 0,
    }
}

/// Frozen, piecewise-constant bias `Â` on the bins of a reaction coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub spec: ReactionCoordinateSpec,
    pub values: Vec<f64>,
}

impl BiasProfile {
    pub fn zero(spec: ReactionCoordinateSpec) -> Self {
        Self {
            spec,
            values: vec![0.0; spec.n_bins],
        }
    }

    pub fn new(spec: ReactionCoordinateSpec, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), spec.n_bins);
        Self { spec, values }
    }

    /// `Â(z)`, constant beyond the interval ends.
    pub fn bias_at(&self, z: f64) -> f64 {
        self.values[clamped_bin(&self.spec, z)]
    }

    pub fn clip(&self, max_range: f64) -> Self {
        Self {
            spec: self.spec,
            values: clip_profile(&self.values, max_range),
        }
    }

    pub fn ef_theoretical(&self) -> f64 {
        ef_theoretical(&self.values)
    }

    /// SHA-256 over the interval, bin count and the exact bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.kind.to_string().as_bytes());
        h.update(self.spec.z_min.to_bits().to_le_bytes());
        h.update(self.spec.z_max.to_bits().to_le_bytes());
        h.update((self.spec.n_bins as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("z_mid,A\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{},{}", self.spec.midpoint(i), v);
        }
        out
    }

    /// Parses a `z_mid,A` file against the configured bins. Values are read
    /// back bit-exactly.
    pub fn from_csv(text: &str, spec: ReactionCoordinateSpec) -> Result<Self, BiasError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, header)) if header.trim() == "z_mid,A" => {}
            _ => {
                return Err(BiasError::Format {
                    line: 1,
                    message: "expected header z_mid,A".into(),
                })
            }
        }
        let mut values = Vec::with_capacity(spec.n_bins);
        for (idx, line) in lines {
            let bad = |message: &str| BiasError::Format {
                line: idx + 1,
                message: message.into(),
            };
            let (z, a) = line.trim().split_once(',').ok_or_else(|| bad("expected two columns"))?;
            let z: f64 = z.parse().map_err(|_| bad("z_mid is not a number"))?;
            let a: f64 = a.parse().map_err(|_| bad("A is not a number"))?;
            if !a.is_finite() {
                return Err(bad("A is not finite"));
            }
            let row = values.len();
            if row < spec.n_bins {
                let expected = spec.midpoint(row);
                if (z - expected).abs() > 1e-9 * spec.delta_z().max(expected.abs()) {
                    return Err(BiasError::Midpoint {
                        row,
                        expected,
                        found: z,
                    });
                }
            }
            values.push(a);
        }
        if values.len() != spec.n_bins {
            return Err(BiasError::BinCount {
                expected: spec.n_bins,
                found: values.len(),
            });
        }
        Ok(Self { spec, values })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), BiasError> {
        fs::write(path, self.to_csv()).map_err(|source| BiasError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_csv(path: &Path, spec: ReactionCoordinateSpec) -> Result<Self, BiasError> {
        let text = fs::read_to_string(path).map_err(|source| BiasError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text, spec)
    }
}

/// `(Σ e^{-A})² / (N Σ e^{-2A})` over bins; 1 for a flat profile.
pub fn ef_theoretical(values: &[f64]) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let (s1, s2) = values.iter().fold((0.0, 0.0), |(s1, s2), v| {
        let e = (-(v - min)).exp();
        (s1 + e, s2 + e * e)
    });
    s1 * s1 / (values.len() as f64 * s2)
}

/// Clamps values above `min + max_range`.
pub fn clip_profile(values: &[f64], max_range: f64) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let cap = min + max_range;
    values.iter().map(|&v| if v > cap { cap } else { v }).collect()
}
