//! Chain traces and convergence logs, with their CSV forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace line {line}: {message}")]
    Format { line: usize, message: String },
}

/// One thinned record: iteration, `ξ`, `V`, the bias `Â(ξ)` in force when
/// the record was taken, and the full state.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: u64,
    pub xi: f64,
    pub potential: f64,
    pub bias: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainTrace {
    pub names: Vec<String>,
    pub records: Vec<TraceRecord>,
    /// Checksum of the frozen profile the chain was run against.
    pub profile_checksum: Option<String>,
}

const CHECKSUM_PREFIX: &str = "# profile ";

impl ChainTrace {
    pub fn new(names: Vec<String>, profile_checksum: Option<String>) -> Self {
        Self {
            names,
            records: Vec::new(),
            profile_checksum,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of a state column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// CSV with header `iter,xi,V,bias,<names>`, plus a trailing `weight`
    /// column when `weights` is given.
    pub fn to_csv(&self, weights: Option<&[f64]>) -> String {
        let mut out = String::new();
        if let Some(sum) = &self.profile_checksum {
            let _ = writeln!(out, "{CHECKSUM_PREFIX}{sum}");
        }
        out.push_str("iter,xi,V,bias");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        if weights.is_some() {
            out.push_str(",weight");
        }
        out.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            let _ = write!(out, "{},{},{},{}", r.iter, r.xi, r.potential, r.bias);
            for v in &r.x {
                let _ = write!(out, ",{v}");
            }
            if let Some(w) = weights {
                let _ = write!(out, ",{}", w[i]);
            }
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`ChainTrace::to_csv`]; a `weight` column, if
    /// present, is ignored.
    pub fn from_csv(text: &str) -> Result<Self, TraceError> {
        let mut checksum = None;
        let mut header: Option<Vec<String>> = None;
        let mut records = Vec::new();
        let mut width = 0;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |message: String| TraceError::Format { line: idx + 1, message };
            if line.is_empty() {
                continue;
            }
            if let Some(sum) = line.strip_prefix(CHECKSUM_PREFIX) {
                checksum = Some(sum.trim().to_string());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let Some(cols) = &header else {
                let cols: Vec<String> = line.split(',').map(str::to_string).collect();
                if cols.len() < 4 || cols[..4] != ["iter", "xi", "V", "bias"] {
                    return Err(bad("expected header iter,xi,V,bias,...".into()));
                }
                width = cols.len();
                header = Some(cols);
                continue;
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(bad(format!("expected {width} fields, got {}", fields.len())));
            }
            let iter = fields[0]
                .parse()
                .map_err(|_| bad(format!("bad iteration {:?}", fields[0])))?;
            let mut nums = Vec::with_capacity(width - 1);
            for f in &fields[1..] {
                nums.push(f.parse::<f64>().map_err(|_| bad(format!("not a number: {f:?}")))?);
            }
            let n_state = cols.len() - 4 - usize::from(cols.last().map(String::as_str) == Some("weight"));
            records.push(TraceRecord {
                iter,
                xi: nums[0],
                potential: nums[1],
                bias: nums[2],
                x: nums[3..3 + n_state].to_vec(),
            });
        }
        let cols = header.ok_or(TraceError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let mut names: Vec<String> = cols[4..].to_vec();
        if names.last().map(String::as_str) == Some("weight") {
            names.pop();
        }
        Ok(Self {
            names,
            records,
            profile_checksum: checksum,
        })
    }

    pub fn write_csv(&self, path: &Path, weights: Option<&[f64]>) -> Result<(), TraceError> {
        write_file(path, &self.to_csv(weights))
    }

    pub fn read_csv(path: &Path) -> Result<Self, TraceError> {
        let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text)
    }
}

/// One convergence check of the adaptive phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceEntry {
    pub iter: u64,
    pub delta: f64,
    pub epsilon: f64,
}

pub fn convergence_csv(entries: &[ConvergenceEntry]) -> String {
    let mut out = String::from("iter,delta,epsilon\n");
    for e in entries {
        let _ = writeln!(out, "{},{},{}", e.iter, e.delta, e.epsilon);
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), TraceError> {
    fs::write(path, contents).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}
