//! Target densities: the univariate Gaussian mixture posterior and a small
//! registry of toy targets whose free energies are known by quadrature.
//!
//! Every target is expressed as a potential `V = -log(unnormalized density)`
//! over a flat state vector, which is what the samplers operate on.

mod data;
mod mixture;
mod toy;

use rand::RngCore;
use thiserror::Error;

use crate::reaction::CoordinateKind;

pub use data::{load_observations, parse_observations, Observations};
pub use mixture::{
    default_prior, log_likelihood, log_posterior_potential, partial_potential, MixtureLayout, MixturePosterior,
    PriorConfig, Theta, ThetaView,
};
pub use toy::{toy_target, GaussianMixtureToy, TOY_TARGETS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: not a number: {content:?}")]
    Parse { line: usize, content: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("observation {index} is not finite")]
    NonFiniteObservation { index: usize },
    #[error("data range is zero; the default prior is undefined")]
    DegenerateData,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("state is outside the support of the target")]
    OutOfSupport,
    #[error("malformed parameter vector: {0}")]
    Shape(String),
    #[error("coordinate {0} has no analytic partial derivative for this target")]
    UnknownCoordinate(String),
    #[error("unknown toy target {0:?}")]
    UnknownToy(String),
}

/// A density on a flat parameter vector, known through its potential.
///
/// Implementations are read-only after construction and may be evaluated
/// concurrently from independent chains.
pub trait TargetModel: Send + Sync {
    fn dimension(&self) -> usize;

    /// Column names used in trace files, one per state component.
    fn coordinate_names(&self) -> Vec<String>;

    fn in_support(&self, x: &[f64]) -> bool;

    /// `V(x)`; [`ModelError::OutOfSupport`] outside the support.
    fn potential(&self, x: &[f64]) -> Result<f64, ModelError>;

    /// `∂V/∂x[index]`.
    fn partial(&self, x: &[f64], index: usize) -> Result<f64, ModelError>;

    /// State index that a projection coordinate reads, `None` when the kind
    /// is not a projection of this target's state.
    fn projection_index(&self, kind: CoordinateKind) -> Option<usize>;

    /// Starting point for a chain.
    fn initial_state(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Moves the projection coordinate `index` to `value`, keeping the state
    /// inside the support.
    fn set_coordinate(&self, x: &mut [f64], index: usize, value: f64) {
        x[index] = value;
    }
}
