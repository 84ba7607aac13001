use rand::RngCore;

use super::{ModelError, TargetModel};
use crate::reaction::CoordinateKind;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Names accepted by [`toy_target`].
pub const TOY_TARGETS: &[&str] = &["double-well", "asymmetric-well", "coupled-2d", "product-2d"];

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    /// Row-major inverse covariance.
    precision: Vec<f64>,
    /// `-½ log det(2π Σ)`.
    log_norm: f64,
}

/// Finite mixture of Gaussians in `d` dimensions. Every coordinate marginal
/// is a 1D Gaussian mixture, so free energies along `x_i` are available in
/// closed form and by quadrature.
#[derive(Debug, Clone)]
pub struct GaussianMixtureToy {
    name: String,
    dim: usize,
    components: Vec<Component>,
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if v <= 0.0 {
                    return None;
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn invert_spd(a: &[f64], d: usize) -> Option<(Vec<f64>, f64)> {
    let l = cholesky(a, d)?;
    let log_det = 2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>();
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        // solve L y = e_col, then Lᵀ x = y
        let mut y = vec![0.0; d];
        for i in 0..d {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|k| l[i * d + k] * y[k]).sum();
            y[i] = (rhs - s) / l[i * d + i];
        }
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| l[k * d + i] * inv[k * d + col]).sum();
            inv[i * d + col] = (y[i] - s) / l[i * d + i];
        }
    }
    Some((inv, log_det))
}

impl GaussianMixtureToy {
    /// `components` holds `(weight, mean, row-major covariance)`; weights are
    /// normalized here.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        components: &[(f64, Vec<f64>, Vec<f64>)],
    ) -> Result<Self, ModelError> {
        if dim == 0 || components.is_empty() {
            return Err(ModelError::Shape("toy mixture needs a dimension and components".into()));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        let mut out = Vec::with_capacity(components.len());
        for (w, mean, cov) in components {
            if w.is_nan() || *w <= 0.0 || mean.len() != dim || cov.len() != dim * dim {
                return Err(ModelError::Shape("bad toy component".into()));
            }
            let (precision, log_det) = invert_spd(cov, dim)
                .ok_or_else(|| ModelError::Shape("toy covariance is not positive definite".into()))?;
            out.push(Component {
                log_weight: (w / total).ln(),
                mean: mean.clone(),
                cov: cov.clone(),
                precision,
                log_norm: -0.5 * (dim as f64 * LN_2PI + log_det),
            });
        }
        Ok(Self {
            name: name.into(),
            dim,
            components: out,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[allow(clippy::needless_range_loop)]
    fn component_log_densities(&self, x: &[f64], buf: &mut Vec<f64>) {
        let d = self.dim;
        buf.clear();
        for c in &self.components {
            let mut quad = 0.0;
            for i in 0..d {
                let di = x[i] - c.mean[i];
                for j in 0..d {
                    quad += di * c.precision[i * d + j] * (x[j] - c.mean[j]);
                }
            }
            buf.push(c.log_weight + c.log_norm - 0.5 * quad);
        }
    }

    /// Normalized log density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.components.len());
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// `(weight, mean, sd)` of the 1D mixture marginal along `x_i`.
    pub fn marginal_components(&self, i: usize) -> Vec<(f64, f64, f64)> {
        self.components
            .iter()
            .map(|c| (c.log_weight.exp(), c.mean[i], c.cov[i * self.dim + i].sqrt()))
            .collect()
    }

    /// Exact `log` marginal density of `x_i` at `z`.
    pub fn log_marginal(&self, i: usize, z: f64) -> f64 {
        let terms: Vec<f64> = self
            .marginal_components(i)
            .iter()
            .map(|&(w, m, s)| w.ln() - s.ln() - 0.5 * LN_2PI - 0.5 * ((z - m) / s).powi(2))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.marginal_components(i).iter().map(|&(w, m, _)| w * m).sum()
    }

    /// Box holding essentially all of the mass along `x_i` (10 sd past the
    /// extreme component means).
    pub fn support_box(&self, i: usize) -> (f64, f64) {
        let comps = self.marginal_components(i);
        let lo = comps
            .iter()
            .map(|&(_, m, s)| m - 10.0 * s)
            .fold(f64::INFINITY, f64::min);
        let hi = comps
            .iter()
            .map(|&(_, m, s)| m + 10.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Extreme component means along `x_i` widened by 3 sd; the default
    /// truncation interval for toy runs.
    pub fn typical_interval(&self, i: usize) -> (f64, f64) {
        let comps = self.marginal_components(i);
        let lo = comps.iter().map(|&(_, m, s)| m - 3.0 * s).fold(f64::INFINITY, f64::min);
        let hi = comps
            .iter()
            .map(|&(_, m, s)| m + 3.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

impl TargetModel for GaussianMixtureToy {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn coordinate_names(&self) -> Vec<String> {
        (0..self.dim).map(|i| format!("x{i}")).collect()
    }

    fn in_support(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().all(|v| v.is_finite())
    }

    fn potential(&self, x: &[f64]) -> Result<f64, ModelError> {
        if !self.in_support(x) {
            return Err(ModelError::OutOfSupport);
        }
        Ok(-self.log_density(x))
    }

    fn partial(&self, x: &[f64], index: usize) -> Result<f64, ModelError> {
        if index >= self.dim {
            return Err(ModelError::UnknownCoordinate(format!("x{index}")));
        }
        if !self.in_support(x) {
            return Err(ModelError::OutOfSupport);
        }
        let d = self.dim;
        let mut buf = Vec::with_capacity(self.components.len());
        self.component_log_densities(x, &mut buf);
        let total = log_sum_exp(&buf);
        let mut grad = 0.0;
        for (c, lp) in self.components.iter().zip(&buf) {
            let r = (lp - total).exp();
            let g: f64 = (0..d).map(|j| c.precision[index * d + j] * (x[j] - c.mean[j])).sum();
            grad += r * g;
        }
        Ok(grad)
    }

    fn projection_index(&self, kind: CoordinateKind) -> Option<usize> {
        match kind {
            CoordinateKind::Toy(i) if i < self.dim => Some(i),
            _ => None,
        }
    }

    fn initial_state(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.components[0].mean.clone()
    }
}

/// Registry of toy targets used by the oracle tests.
pub fn toy_target(name: &str) -> Result<GaussianMixtureToy, ModelError> {
    let one = |v: f64| vec![v * v];
    match name {
        "double-well" => GaussianMixtureToy::new(name, 1, &[(0.5, vec![-3.0], one(1.0)), (0.5, vec![3.0], one(1.0))]),
        "asymmetric-well" => {
            GaussianMixtureToy::new(name, 1, &[(0.3, vec![-2.0], one(0.6)), (0.7, vec![2.5], one(1.0))])
        }
        "coupled-2d" => GaussianMixtureToy::new(
            name,
            2,
            &[
                (0.4, vec![-2.5, -2.0], vec![1.0, 0.0, 0.0, 0.36]),
                (0.6, vec![2.5, 2.0], vec![1.0, 0.3, 0.3, 0.5]),
            ],
        ),
        "product-2d" => {
            let mut comps = Vec::new();
            for &a in &[-3.0, 3.0] {
                for &b in &[-1.5, 1.5] {
                    comps.push((0.25, vec![a, b], vec![1.0, 0.0, 0.0, 0.25]));
                }
            }
            GaussianMixtureToy::new(name, 2, &comps)
        }
        other => Err(ModelError::UnknownToy(other.to_string())),
    }
}
