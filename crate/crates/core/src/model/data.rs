use std::fs;
use std::path::Path;

use super::ModelError;

/// Univariate observations together with the summary statistics the prior
/// is wired from.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    values: Vec<f64>,
    range: f64,
    mean: f64,
}

impl Observations {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteObservation { index: pos });
        }
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self {
            values,
            range: max - min,
            mean,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// max − min of the data.
    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Empirical quantile with linear interpolation between order statistics.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Parses the single-column dataset format: one decimal number per line,
/// blank lines and `#` comments skipped, `\n` or `\r\n` endings.
pub fn parse_observations(text: &str) -> Result<Observations, ModelError> {
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| ModelError::Parse {
            line: idx + 1,
            content: line.to_string(),
        })?;
        values.push(v);
    }
    Observations::new(values)
}

pub fn load_observations(path: impl AsRef<Path>) -> Result<Observations, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_observations(&text)
}
