//! Reaction coordinates: which scalar function of the state is biased, over
//! which truncation interval, and with which bin geometry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{log_posterior_potential, ModelError, Observations, PriorConfig, TargetModel, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoordinateKind {
    Beta,
    Q1,
    Mu1,
    NegLogPost,
    /// Coordinate `x_i` of a toy target.
    Toy(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum ReactionError {
    #[error("unknown reaction coordinate {0:?} (expected beta, q1, mu1, neglogpost or x<i>)")]
    UnknownKind(String),
    #[error("unknown scheme {0:?} (expected abf or abp)")]
    UnknownScheme(String),
    #[error("interval must satisfy z_min < z_max, got [{0}, {1}]")]
    EmptyInterval(f64, f64),
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("no default interval for {0}: the range of the potential is not known beforehand, pass --zmin and --zmax")]
    NoDefaultInterval(CoordinateKind),
    #[error("coordinate {0} does not apply to this target")]
    NotApplicable(CoordinateKind),
}

impl fmt::Display for CoordinateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Beta => f.write_str("beta"),
            Self::Q1 => f.write_str("q1"),
            Self::Mu1 => f.write_str("mu1"),
            Self::NegLogPost => f.write_str("neglogpost"),
            Self::Toy(i) => write!(f, "x{i}"),
        }
    }
}

impl FromStr for CoordinateKind {
    type Err = ReactionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "beta" => Ok(Self::Beta),
            "q1" => Ok(Self::Q1),
            "mu1" => Ok(Self::Mu1),
            "neglogpost" => Ok(Self::NegLogPost),
            other => other
                .strip_prefix('x')
                .and_then(|i| i.parse().ok())
                .map(Self::Toy)
                .ok_or_else(|| ReactionError::UnknownKind(s.to_string())),
        }
    }
}

impl Serialize for CoordinateKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CoordinateKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Adaptive scheme: analytic mean force (ABF) or force-free probability
/// accumulation (ABP).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Abf,
    Abp,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Abf => "abf",
            Self::Abp => "abp",
        })
    }
}

impl FromStr for Scheme {
    type Err = ReactionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "abf" => Ok(Self::Abf),
            "abp" => Ok(Self::Abp),
            _ => Err(ReactionError::UnknownScheme(s.to_string())),
        }
    }
}

/// ABP for the potential itself (its mean force needs a divergence term),
/// ABF otherwise unless overridden.
pub fn scheme_for(kind: CoordinateKind, override_scheme: Option<Scheme>) -> Scheme {
    match (kind, override_scheme) {
        (CoordinateKind::NegLogPost, _) => Scheme::Abp,
        (_, Some(s)) => s,
        _ => Scheme::Abf,
    }
}

/// Coordinate kind plus truncation interval `[z_min, z_max]` split into
/// `n_bins` equal bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionCoordinateSpec {
    pub kind: CoordinateKind,
    pub z_min: f64,
    pub z_max: f64,
    pub n_bins: usize,
}

impl ReactionCoordinateSpec {
    pub fn new(kind: CoordinateKind, z_min: f64, z_max: f64, n_bins: usize) -> Result<Self, ReactionError> {
        let spec = Self {
            kind,
            z_min,
            z_max,
            n_bins,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ReactionError> {
        if !(self.z_min.is_finite() && self.z_max.is_finite() && self.z_min < self.z_max) {
            return Err(ReactionError::EmptyInterval(self.z_min, self.z_max));
        }
        if self.n_bins < 2 {
            return Err(ReactionError::TooFewBins(self.n_bins));
        }
        Ok(())
    }

    pub fn delta_z(&self) -> f64 {
        (self.z_max - self.z_min) / self.n_bins as f64
    }

    /// Left edge of bin `i`; `edge(n_bins)` is `z_max` exactly.
    pub fn edge(&self, i: usize) -> f64 {
        if i == self.n_bins {
            self.z_max
        } else {
            self.z_min + i as f64 * self.delta_z()
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|i| self.edge(i)).collect()
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        self.z_min + (i as f64 + 0.5) * self.delta_z()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.midpoint(i)).collect()
    }

    /// Bin `i` with `edge(i) <= z < edge(i+1)`; `z_max` belongs to the last
    /// bin. `None` outside the interval or for NaN.
    pub fn bin_index(&self, z: f64) -> Option<usize> {
        if !(z >= self.z_min && z <= self.z_max) {
            return None;
        }
        let n = self.n_bins;
        let mut i = (((z - self.z_min) / self.delta_z()) as usize).min(n - 1);
        // the division can land one bin off next to an edge
        if i > 0 && z < self.edge(i) {
            i -= 1;
        } else if i + 1 < n && z >= self.edge(i + 1) {
            i += 1;
        }
        Some(i)
    }

    /// Projection coordinate bound to a concrete target.
    pub fn resolve(&self, target: &dyn TargetModel) -> Result<ReactionCoordinate, ReactionError> {
        let projection = match self.kind {
            CoordinateKind::NegLogPost => None,
            kind => Some(
                target
                    .projection_index(kind)
                    .ok_or(ReactionError::NotApplicable(kind))?,
            ),
        };
        Ok(ReactionCoordinate {
            spec: *self,
            projection,
        })
    }
}

/// A [`ReactionCoordinateSpec`] bound to a target: either a projection onto
/// one state index or the potential itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionCoordinate {
    pub spec: ReactionCoordinateSpec,
    pub projection: Option<usize>,
}

impl ReactionCoordinate {
    /// `ξ(x)` given the already evaluated potential `V(x)`.
    pub fn value(&self, x: &[f64], potential: f64) -> f64 {
        match self.projection {
            Some(i) => x[i],
            None => potential,
        }
    }

    pub fn evaluate(&self, target: &dyn TargetModel, x: &[f64]) -> Result<f64, ModelError> {
        match self.projection {
            Some(i) if target.in_support(x) => Ok(x[i]),
            Some(_) => Err(ModelError::OutOfSupport),
            None => target.potential(x),
        }
    }
}

/// `ξ(θ)` for the mixture posterior.
pub fn evaluate(
    spec: &ReactionCoordinateSpec,
    theta: &Theta,
    obs: &Observations,
    prior: &PriorConfig,
) -> Result<f64, ModelError> {
    if !theta.in_support() {
        return Err(ModelError::OutOfSupport);
    }
    match spec.kind {
        CoordinateKind::Beta => Ok(theta.beta),
        CoordinateKind::Q1 => theta
            .q
            .first()
            .copied()
            .ok_or_else(|| ModelError::UnknownCoordinate("q1 with K=1".into())),
        CoordinateKind::Mu1 => Ok(theta.mu[0]),
        CoordinateKind::NegLogPost => log_posterior_potential(theta, obs, prior),
        kind @ CoordinateKind::Toy(_) => Err(ModelError::UnknownCoordinate(kind.to_string())),
    }
}

/// Default truncation interval: `[R²/2000, R²/20]` for β, `[0,1]` for q₁,
/// the data range for μ₁.
pub fn default_interval(kind: CoordinateKind, obs: &Observations) -> Result<(f64, f64), ReactionError> {
    let r = obs.range();
    match kind {
        CoordinateKind::Beta => Ok((r * r / 2000.0, r * r / 20.0)),
        CoordinateKind::Q1 => Ok((0.0, 1.0)),
        CoordinateKind::Mu1 => Ok((obs.min(), obs.max())),
        kind => Err(ReactionError::NoDefaultInterval(kind)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_prior, MixturePosterior};
    use proptest::prelude::*;

    #[test]
    fn kind_tokens_round_trip() {
        for kind in [
            CoordinateKind::Beta,
            CoordinateKind::Q1,
            CoordinateKind::Mu1,
            CoordinateKind::NegLogPost,
            CoordinateKind::Toy(1),
        ] {
            assert_eq!(kind.to_string().parse::<CoordinateKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(serde_json::from_str::<CoordinateKind>(&json).unwrap(), kind);
        }
        assert!("sigma".parse::<CoordinateKind>().is_err());
        assert_eq!("ABP".parse::<Scheme>().unwrap(), Scheme::Abp);
    }

    #[test]
    fn bin_index_examples() {
        let spec = ReactionCoordinateSpec::new(CoordinateKind::Q1, 0.0, 1.0, 4).unwrap();
        assert_eq!(spec.bin_index(0.3), Some(1));
        assert_eq!(spec.bin_index(1.0), Some(3));
        assert_eq!(spec.bin_index(0.0), Some(0));
        assert_eq!(spec.bin_index(0.25), Some(1));
        assert_eq!(spec.bin_index(1.0001), None);
        assert_eq!(spec.bin_index(-1e-12), None);
        assert_eq!(spec.bin_index(f64::NAN), None);
    }

    #[test]
    fn spec_validation() {
        assert!(ReactionCoordinateSpec::new(CoordinateKind::Beta, 1.0, 1.0, 4).is_err());
        assert!(ReactionCoordinateSpec::new(CoordinateKind::Beta, 0.0, 1.0, 1).is_err());
        let s = ReactionCoordinateSpec::new(CoordinateKind::Beta, 0.05, 4.0, 395).unwrap();
        assert!((s.delta_z() - 0.01).abs() < 1e-15);
        assert_eq!(s.edges().last().copied(), Some(4.0));
    }

    #[test]
    fn schemes() {
        assert_eq!(scheme_for(CoordinateKind::NegLogPost, None), Scheme::Abp);
        assert_eq!(scheme_for(CoordinateKind::NegLogPost, Some(Scheme::Abf)), Scheme::Abp);
        assert_eq!(scheme_for(CoordinateKind::Beta, None), Scheme::Abf);
        assert_eq!(scheme_for(CoordinateKind::Q1, Some(Scheme::Abp)), Scheme::Abp);
    }

    #[test]
    fn default_intervals() {
        let obs = Observations::new(vec![2.0, 12.0, 5.0]).unwrap();
        assert_eq!(default_interval(CoordinateKind::Beta, &obs).unwrap(), (0.05, 5.0));
        assert_eq!(default_interval(CoordinateKind::Q1, &obs).unwrap(), (0.0, 1.0));
        assert_eq!(default_interval(CoordinateKind::Mu1, &obs).unwrap(), (2.0, 12.0));
        assert_eq!(
            default_interval(CoordinateKind::NegLogPost, &obs),
            Err(ReactionError::NoDefaultInterval(CoordinateKind::NegLogPost))
        );
        let doubled = Observations::new(vec![4.0, 24.0, 10.0]).unwrap();
        let (a, b) = default_interval(CoordinateKind::Beta, &doubled).unwrap();
        assert_eq!((a, b), (0.2, 20.0));
    }

    #[test]
    fn projections_and_potential() {
        let obs = Observations::new(vec![-1.0, 0.5, 2.0]).unwrap();
        let prior = default_prior(&obs, 3).unwrap();
        let theta = Theta::new(vec![0.3, 0.2], vec![0.1, 1.0, 2.0], vec![1.0, 2.0, 3.0], 0.25).unwrap();
        let at = |kind| {
            let spec = ReactionCoordinateSpec::new(kind, 0.0, 1.0, 4).unwrap();
            evaluate(&spec, &theta, &obs, &prior).unwrap()
        };
        assert_eq!(at(CoordinateKind::Beta), 0.25);
        assert_eq!(at(CoordinateKind::Q1), 0.3);
        assert_eq!(at(CoordinateKind::Mu1), 0.1);
        let v = log_posterior_potential(&theta, &obs, &prior).unwrap();
        assert_eq!(at(CoordinateKind::NegLogPost).to_bits(), v.to_bits());

        let target = MixturePosterior::new(obs.clone(), prior.clone()).unwrap();
        let x = theta.to_flat();
        for kind in [
            CoordinateKind::Beta,
            CoordinateKind::Q1,
            CoordinateKind::Mu1,
            CoordinateKind::NegLogPost,
        ] {
            let rc = ReactionCoordinateSpec::new(kind, 0.0, 1.0, 4)
                .unwrap()
                .resolve(&target)
                .unwrap();
            assert_eq!(rc.evaluate(&target, &x).unwrap().to_bits(), at(kind).to_bits());
        }
        let toy = ReactionCoordinateSpec::new(CoordinateKind::Toy(0), 0.0, 1.0, 4).unwrap();
        assert_eq!(
            toy.resolve(&target),
            Err(ReactionError::NotApplicable(CoordinateKind::Toy(0)))
        );
    }

    proptest! {
        #[test]
        fn midpoints_land_in_their_bins(z_min in -1e3f64..1e3, width in 1e-3f64..1e3, n in 2usize..2000) {
            let spec = ReactionCoordinateSpec::new(CoordinateKind::Beta, z_min, z_min + width, n).unwrap();
            for i in 0..n {
                prop_assert_eq!(spec.bin_index(spec.midpoint(i)), Some(i));
                let e = spec.edge(i);
                if e >= spec.z_min {
                    prop_assert_eq!(spec.bin_index(e), Some(i));
                }
            }
        }
    }
}
