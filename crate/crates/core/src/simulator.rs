//! Virtual-time event queue, delay models, the async/sync timing ratio and
//! fault injection for adversarial workers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{LabeledDataset, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum SimulatorError {
    #[error("invalid delay model: {0}")]
    InvalidDelay(String),
    #[error("invalid fault spec: {0}")]
    InvalidFault(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Scheduled<E> {
    time: OrderedFloat<f64>,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Min-queue over `(time, insertion sequence)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Schedules `event` at `time` and returns its sequence number.
    pub fn push(&mut self, time: f64, event: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time: OrderedFloat(time), seq, event });
        seq
    }

    /// Pops the earliest event; `None` when the queue is drained.
    pub fn next_event(&mut self) -> Option<(f64, E)> {
        self.heap.pop().map(|s| (s.time.0, s.event))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|s| s.time.0)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Constant { delay: f64 },
    PerWorker { delays: Vec<f64> },
    Lognormal {
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
}

fn default_mu() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    0.4
}

impl Default for DelayModel {
    fn default() -> Self {
        Self::Lognormal { mu: default_mu(), sigma: default_sigma() }
    }
}

impl DelayModel {
    pub fn validate(&self, workers: usize) -> Result<(), SimulatorError> {
        let ok = |d: f64| d > 0.0 && d.is_finite();
        match self {
            Self::Constant { delay } if ok(*delay) => Ok(()),
            Self::PerWorker { delays } if delays.len() == workers && delays.iter().all(|d| ok(*d)) => Ok(()),
            Self::Lognormal { mu, sigma } if mu.is_finite() && *sigma >= 0.0 && sigma.is_finite() => Ok(()),
            other => Err(SimulatorError::InvalidDelay(format!("{other:?} for {workers} workers"))),
        }
    }

    /// Whether every draw is the same fixed value per worker.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::Lognormal { .. })
    }
}

pub fn sample_delay<R: Rng + ?Sized>(model: &DelayModel, worker: usize, rng: &mut R) -> f64 {
    match model {
        DelayModel::Constant { delay } => *delay,
        DelayModel::PerWorker { delays } => delays[worker],
        DelayModel::Lognormal { mu, sigma } => LogNormal::new(*mu, *sigma).expect("validated sigma").sample(rng),
    }
}

/// Predicted ratio of asynchronous to synchronous completion time,
/// `T1 S / (T2 sum_j max_d / d_j)`, for async iterations `t1` and sync
/// iterations `t2`.
pub fn time_ratio(t1: f64, t2: f64, s: usize, delays: &[f64]) -> f64 {
    let max = delays.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rate: f64 = delays.iter().map(|d| max / d).sum();
    t1 * s as f64 / (t2 * rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backdoor {
    pub trigger_feature: usize,
    pub trigger_value: f64,
    pub target_label: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSpec {
    pub malicious: Vec<usize>,
    /// Multiplier on the loss a malicious worker reports.
    pub beta: f64,
    pub backdoor: Option<Backdoor>,
}

impl Default for FaultSpec {
    fn default() -> Self {
        Self { malicious: Vec::new(), beta: 1.0, backdoor: None }
    }
}

impl FaultSpec {
    pub fn validate(&self, workers: usize, dim: usize, classes: usize) -> Result<(), SimulatorError> {
        if let Some(&j) = self.malicious.iter().find(|&&j| j >= workers) {
            return Err(SimulatorError::InvalidFault(format!("malicious worker {j} out of range")));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(SimulatorError::InvalidFault(format!("beta {} must be >= 1", self.beta)));
        }
        if let Some(b) = &self.backdoor {
            if b.trigger_feature >= dim {
                return Err(SimulatorError::InvalidFault(format!(
                    "trigger feature {} out of range for dimension {dim}",
                    b.trigger_feature
                )));
            }
            if b.target_label >= classes {
                return Err(SimulatorError::InvalidFault(format!("target label {} out of range", b.target_label)));
            }
            if !(0.0..=1.0).contains(&b.fraction) || !b.trigger_value.is_finite() {
                return Err(SimulatorError::InvalidFault("fraction must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn is_malicious(&self, worker: usize) -> bool {
        self.malicious.contains(&worker)
    }

    /// Loss the worker ships to the master.
    pub fn reported_loss(&self, worker: usize, actual: f64) -> f64 {
        if self.is_malicious(worker) {
            self.beta * actual
        } else {
            actual
        }
    }
}

/// Poisons `round(fraction * n)` samples of every malicious worker. Returns
/// the modified datasets and, per worker, the sorted poisoned row indices.
pub fn inject_faults<R: Rng + ?Sized>(
    datasets: &[LabeledDataset],
    spec: &FaultSpec,
    rng: &mut R,
) -> Result<(Vec<LabeledDataset>, Vec<Vec<usize>>), SimulatorError> {
    let mut out = datasets.to_vec();
    let mut mask = vec![Vec::new(); datasets.len()];
    let Some(first) = datasets.first() else {
        return Ok((out, mask));
    };
    spec.validate(datasets.len(), first.dim(), first.classes())?;
    let Some(b) = &spec.backdoor else {
        return Ok((out, mask));
    };
    for &j in &spec.malicious {
        let data = &mut out[j];
        let count = (b.fraction * data.len() as f64).round() as usize;
        let mut rows = rand::seq::index::sample(rng, data.len(), count).into_vec();
        rows.sort_unstable();
        for &i in &rows {
            data.set_feature(i, b.trigger_feature, b.trigger_value);
            data.set_label(i, b.target_label);
        }
        mask[j] = rows;
    }
    Ok((out, mask))
}

/// Clean samples whose label differs from the target, with the trigger
/// applied and the original label kept.
pub fn backdoor_test_set(clean: &[LabeledDataset], backdoor: &Backdoor) -> Result<LabeledDataset, SimulatorError> {
    let first = clean.first().ok_or_else(|| SimulatorError::InvalidFault("no datasets".into()))?;
    let dim = first.dim();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for data in clean {
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            if y != backdoor.target_label {
                let mut row = x.to_vec();
                row[backdoor.trigger_feature] = backdoor.trigger_value;
                features.extend(row);
                labels.push(y);
            }
        }
    }
    Ok(LabeledDataset::new(features, labels, dim, first.classes(), usize::MAX)?)
}
