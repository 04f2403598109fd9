//! Local objectives: softmax cross-entropy over multiclass logistic regression
//! and small ReLU MLPs, with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` maps `sizes[l]` inputs to
//! `sizes[l + 1]` outputs and occupies `sizes[l + 1] * sizes[l]` weights
//! (row-major, one row per output unit) followed by `sizes[l + 1]` biases.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter length {got} does not match model ({expected})")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("feature dimension {got} does not match model input ({expected})")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch index {index} out of range for {n} samples")]
    BatchIndex { index: usize, n: usize },
    #[error("batch size {m} invalid for {n} samples")]
    BatchSize { m: usize, n: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Samples held by one worker. Features are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    pub worker_id: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        worker_id: usize,
    ) -> Result<Self, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::InvalidDataset("no samples".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(ModelError::InvalidDataset(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(ModelError::LabelOutOfRange { label, classes });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidDataset("non-finite feature".into()));
        }
        Ok(Self { features, labels, dim, classes, worker_id })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Mutable access for fault injection; keeps the dataset invariants
    /// because labels are re-checked by the caller-facing setter.
    pub(crate) fn set_feature(&mut self, i: usize, k: usize, value: f64) {
        self.features[i * self.dim + k] = value;
    }

    pub(crate) fn set_label(&mut self, i: usize, label: usize) {
        debug_assert!(label < self.classes);
        self.labels[i] = label;
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, ModelError> {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            if i >= self.len() {
                return Err(ModelError::BatchIndex { index: i, n: self.len() });
            }
            let (x, y) = self.sample(i);
            features.extend_from_slice(x);
            labels.push(y);
        }
        Self::new(features, labels, self.dim, self.classes, self.worker_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

/// Architecture of a local model: affine layers with ReLU between them and a
/// softmax output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Layer widths from input to output, `[d, h_1, .., c]`.
    pub sizes: Vec<usize>,
}

impl ModelSpec {
    pub fn logistic(dim: usize, classes: usize) -> Result<Self, ModelError> {
        let spec = Self { kind: ModelKind::Logistic, sizes: vec![dim, classes] };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(dim: usize, hidden: &[usize], classes: usize) -> Result<Self, ModelError> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let spec = Self { kind: ModelKind::Mlp, sizes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sizes.contains(&0) {
            return Err(ModelError::InvalidSpec("zero-width layer".into()));
        }
        match self.kind {
            ModelKind::Logistic if self.sizes.len() != 2 => {
                Err(ModelError::InvalidSpec("logistic model has exactly one affine layer".into()))
            }
            ModelKind::Mlp if self.sizes.len() < 3 => {
                Err(ModelError::InvalidSpec("mlp needs at least one hidden layer".into()))
            }
            _ if self.classes() < 2 => Err(ModelError::InvalidSpec("need at least 2 classes".into())),
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Deterministic initial parameters. Logistic models start at zero; MLPs
    /// use a scaled uniform draw so hidden units are not symmetric.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut values = vec![0.0; self.num_params()];
        if self.kind == ModelKind::Mlp {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut offset = 0;
            for w in self.sizes.windows(2) {
                let scale = (6.0 / (w[0] + w[1]) as f64).sqrt();
                for v in &mut values[offset..offset + w[0] * w[1]] {
                    *v = rng.random_range(-scale..scale);
                }
                offset += w[0] * w[1] + w[1];
            }
        }
        ModelParams { values, sizes: self.sizes.clone() }
    }

    fn check(&self, params: &[f64], data: &LabeledDataset) -> Result<(), ModelError> {
        if params.len() != self.num_params() {
            return Err(ModelError::ShapeMismatch { expected: self.num_params(), got: params.len() });
        }
        if data.dim() != self.input_dim() {
            return Err(ModelError::FeatureMismatch { expected: self.input_dim(), got: data.dim() });
        }
        if data.classes() > self.classes() {
            return Err(ModelError::InvalidSpec(format!(
                "dataset has {} classes, model outputs {}",
                data.classes(),
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector together with the layer widths it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub sizes: Vec<usize>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, spec: &ModelSpec) -> Result<Self, ModelError> {
        if values.len() != spec.num_params() {
            return Err(ModelError::ShapeMismatch { expected: spec.num_params(), got: values.len() });
        }
        Ok(Self { values, sizes: spec.sizes.clone() })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// `-log softmax(logits)[label]`, stabilized by subtracting the max logit.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok((log_sum - (logits[label] - max)).max(0.0))
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Forward pass keeping every layer's post-activation output.
fn forward(params: &[f64], sizes: &[usize], x: &[f64]) -> Vec<Vec<f64>> {
    let layers = sizes.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
    acts.push(x.to_vec());
    let mut offset = 0;
    for l in 0..layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let weights = &params[offset..offset + n_in * n_out];
        let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let input = &acts[l];
        let mut out: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &weights[o * n_in..(o + 1) * n_in];
                row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + bias[o]
            })
            .collect();
        if l + 1 < layers {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        acts.push(out);
        offset += n_in * n_out + n_out;
    }
    acts
}

/// Loss of one sample; accumulates `scale * grad` into `grad` when given.
fn sample_loss_grad(
    params: &[f64],
    sizes: &[usize],
    x: &[f64],
    y: usize,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let acts = forward(params, sizes, x);
    let logits = acts.last().expect("output layer");
    let loss = softmax_cross_entropy(logits, y).expect("label checked by dataset");
    let Some((grad, scale)) = grad else {
        return loss;
    };

    let layers = sizes.len() - 1;
    let mut delta = logits.clone();
    softmax_in_place(&mut delta);
    delta[y] -= 1.0;

    let mut offsets = Vec::with_capacity(layers);
    let mut offset = 0;
    for l in 0..layers {
        offsets.push(offset);
        offset += sizes[l] * sizes[l + 1] + sizes[l + 1];
    }
    for l in (0..layers).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let base = offsets[l];
        let input = &acts[l];
        for o in 0..n_out {
            let d = delta[o] * scale;
            if d != 0.0 {
                let row = &mut grad[base + o * n_in..base + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            grad[base + n_in * n_out + o] += d;
        }
        if l > 0 {
            let weights = &params[base..base + n_in * n_out];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                if delta[o] != 0.0 {
                    for (nx, w) in next.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *nx += delta[o] * w;
                    }
                }
            }
            // ReLU derivative, taken as 0 at 0.
            for (nx, a) in next.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *nx = 0.0;
                }
            }
            delta = next;
        }
    }
    loss
}

/// Full-batch mean cross-entropy `f_j(w)`.
pub fn local_loss(params: &[f64], spec: &ModelSpec, data: &LabeledDataset) -> Result<f64, ModelError> {
    spec.check(params, data)?;
    let total: f64 = (0..data.len())
        .map(|i| {
            let (x, y) = data.sample(i);
            sample_loss_grad(params, &spec.sizes, x, y, None)
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Gradient of the mean loss over `batch` (all samples when `None`).
pub fn local_grad(
    params: &[f64],
    spec: &ModelSpec,
    data: &LabeledDataset,
    batch: Option<&[usize]>,
) -> Result<Vec<f64>, ModelError> {
    local_loss_and_grad(params, spec, data, batch).map(|(_, g)| g)
}

/// Mean loss and its gradient over `batch` in a single pass.
pub fn local_loss_and_grad(
    params: &[f64],
    spec: &ModelSpec,
    data: &LabeledDataset,
    batch: Option<&[usize]>,
) -> Result<(f64, Vec<f64>), ModelError> {
    spec.check(params, data)?;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    match batch {
        Some(rows) => {
            if rows.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            if let Some(&index) = rows.iter().find(|&&i| i >= data.len()) {
                return Err(ModelError::BatchIndex { index, n: data.len() });
            }
            let scale = 1.0 / rows.len() as f64;
            for &i in rows {
                let (x, y) = data.sample(i);
                loss += sample_loss_grad(params, &spec.sizes, x, y, Some((&mut grad, scale)));
            }
            loss *= scale;
        }
        None => {
            let scale = 1.0 / data.len() as f64;
            for i in 0..data.len() {
                let (x, y) = data.sample(i);
                loss += sample_loss_grad(params, &spec.sizes, x, y, Some((&mut grad, scale)));
            }
            loss *= scale;
        }
    }
    Ok((loss, grad))
}

/// Predicted class of each sample (argmax of the logits, lowest index on ties).
pub fn predict(params: &[f64], spec: &ModelSpec, data: &LabeledDataset) -> Result<Vec<usize>, ModelError> {
    spec.check(params, data)?;
    Ok((0..data.len())
        .map(|i| {
            let acts = forward(params, &spec.sizes, data.sample(i).0);
            argmax(acts.last().expect("output layer"))
        })
        .collect())
}

pub fn accuracy(params: &[f64], spec: &ModelSpec, data: &LabeledDataset) -> Result<f64, ModelError> {
    let predicted = predict(params, spec, data)?;
    let hits = predicted.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `m` distinct indices drawn uniformly without replacement from `0..n`.
pub fn sample_batch(n: usize, m: usize, seed: u64) -> Result<Vec<usize>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch_with(n, m, &mut rng)
}

pub fn sample_batch_with<R: rand::Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>, ModelError> {
    if m == 0 || m > n {
        return Err(ModelError::BatchSize { m, n });
    }
    Ok(index::sample(rng, n, m).into_vec())
}
