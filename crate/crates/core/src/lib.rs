//! Free-energy biased Metropolis–Hastings sampling for multimodal posteriors.

pub mod bias;
pub mod cli;
pub mod estimators;
pub mod model;
pub mod oracle;
pub mod reaction;
pub mod sampler;
pub mod trace;
