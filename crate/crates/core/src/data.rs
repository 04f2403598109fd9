//! Synthetic heterogeneous worker data and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{LabeledDataset, ModelError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0}: no data rows")]
    Empty(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub workers: usize,
    pub dim: usize,
    pub classes: usize,
    pub samples_per_worker: usize,
    /// Dirichlet concentration of each worker's class prior.
    pub alpha: f64,
    /// Standard deviation of each worker's feature mean shift.
    pub shift: f64,
    /// Standard deviation of the per-sample feature noise.
    pub noise: f64,
    /// Standard deviation of the class means.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            workers: 4,
            dim: 10,
            classes: 3,
            samples_per_worker: 200,
            alpha: 1.0,
            shift: 0.5,
            noise: 1.0,
            separation: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [self.workers, self.dim, self.samples_per_worker];
        if counts.contains(&0) || self.classes < 2 {
            return Err(DataError::InvalidSpec("counts must be >= 1 and classes >= 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DataError::InvalidSpec(format!("alpha {} must be positive", self.alpha)));
        }
        if [self.shift, self.noise, self.separation].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(DataError::InvalidSpec("shift, noise and separation must be nonnegative".into()));
        }
        Ok(())
    }
}

fn dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated alpha");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|g| g / total).collect()
    } else {
        // Every draw underflowed at tiny alpha: all mass on one class.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Largest-remainder rounding of `n * prior` to integer counts summing to `n`.
fn class_counts(prior: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = prior.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..prior.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<LabeledDataset>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| spec.separation * normal(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(spec.workers);
    for j in 0..spec.workers {
        let prior = dirichlet(spec.alpha, spec.classes, &mut rng);
        let shift: Vec<f64> = (0..spec.dim).map(|_| spec.shift * normal(&mut rng)).collect();
        let mut labels: Vec<usize> = class_counts(&prior, spec.samples_per_worker)
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
            .collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(labels.len() * spec.dim);
        for &y in &labels {
            for k in 0..spec.dim {
                features.push(means[y][k] + shift[k] + spec.noise * normal(&mut rng));
            }
        }
        out.push(LabeledDataset::new(features, labels, spec.dim, spec.classes, j)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    /// Zero-based column holding the class label.
    pub label_column: usize,
    /// Zero-based feature columns; every other column when `None`.
    pub feature_columns: Option<Vec<usize>>,
    pub has_header: bool,
    /// Rescale every feature to zero mean and unit variance.
    pub standardize: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { label_column: 0, feature_columns: None, has_header: true, standardize: false }
    }
}

/// A loaded file plus the original label strings, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub dataset: LabeledDataset,
    pub label_names: Vec<String>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema, worker_id: usize) -> Result<LoadedCsv, DataError> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io { path: display.clone(), source: e.into() })?;
    let mut width = None;
    let mut columns: Vec<usize> = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        match width {
            None => {
                width = Some(record.len());
                columns = match &schema.feature_columns {
                    Some(cols) => cols.clone(),
                    None => (0..record.len()).filter(|&c| c != schema.label_column).collect(),
                };
                let bad = columns.iter().chain([&schema.label_column]).find(|&&c| c >= record.len());
                if let Some(c) = bad {
                    return Err(DataError::Parse { line, message: format!("column {c} out of range") });
                }
                if columns.is_empty() {
                    return Err(DataError::Parse { line, message: "no feature columns".into() });
                }
            }
            Some(w) if w != record.len() => {
                return Err(DataError::Parse { line, message: format!("expected {w} fields, found {}", record.len()) });
            }
            Some(_) => {}
        }
        let name = &record[schema.label_column];
        let label = match label_names.iter().position(|l| l == name) {
            Some(i) => i,
            None => {
                label_names.push(name.to_string());
                label_names.len() - 1
            }
        };
        labels.push(label);
        for &c in &columns {
            let value: f64 = record[c].parse().map_err(|_| DataError::Parse {
                line,
                message: format!("non-numeric value {:?} in column {c}", &record[c]),
            })?;
            if !value.is_finite() {
                return Err(DataError::Parse { line, message: format!("non-finite value in column {c}") });
            }
            features.push(value);
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty(display));
    }
    let dim = columns.len();
    if schema.standardize {
        standardize(&mut features, dim);
    }
    let classes = label_names.len().max(2);
    let dataset = LabeledDataset::new(features, labels, dim, classes, worker_id)?;
    Ok(LoadedCsv { dataset, label_names })
}

/// Per-column zero mean and unit population variance; constant columns are
/// only centered.
fn standardize(features: &mut [f64], dim: usize) {
    let n = (features.len() / dim) as f64;
    for k in 0..dim {
        let mean = features.iter().skip(k).step_by(dim).sum::<f64>() / n;
        let var = features.iter().skip(k).step_by(dim).map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        for x in features.iter_mut().skip(k).step_by(dim) {
            *x = (*x - mean) / scale;
        }
    }
}
