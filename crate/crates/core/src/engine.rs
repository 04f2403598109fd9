//! Master/worker protocol over a virtual clock.
//!
//! Every worker always has exactly one update either in flight or waiting in
//! the master's inbox: it computes the update the moment it receives a
//! broadcast and the message lands one sampled delay later. The master fires
//! once at least `S` updates are queued and every worker that would otherwise
//! exceed the staleness bound has reported. Master-to-worker delivery is
//! instantaneous.

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lagrangian::{
    central_gradient, master_update, phi_update, project_scalar, worker_update, BoxBounds, CentralState,
    LagrangianError, ResolvedSchedule, Schedules, SystemState, WorkerSnapshot,
};
use crate::metrics::{
    central_stationarity_gap, malicious_weight_share, stationarity_gap, worst_case_stats, IterationMetrics,
    MetricsError,
};
use crate::models::{accuracy, local_loss, local_loss_and_grad, sample_batch_with, LabeledDataset, ModelError, ModelKind, ModelSpec};
use crate::simulator::{sample_delay, DelayModel, EventQueue, FaultSpec, SimulatorError};
use crate::uncertainty::{make_plane, solve_cutting_plane_lp, violates, CdNormSet, CuttingPlaneSet, UncertaintyError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Asynchronous protocol with plane generation and pruning.
    AspireEase,
    /// Asynchronous protocol with plane generation but no pruning.
    AspireCp,
    /// Every worker every iteration (`S = N`, `tau = 1`).
    Sync,
    /// Fixed uniform weights: zero budget, uniform prior, no generation.
    MixEven,
    /// One model, no consensus variables, unit virtual time per iteration.
    Centralized,
}

impl Mode {
    pub fn generates_planes(self) -> bool {
        !matches!(self, Mode::MixEven)
    }

    pub fn prunes(self) -> bool {
        !matches!(self, Mode::AspireCp)
    }
}

/// How many queued updates the master consumes per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsumePolicy {
    /// Everything queued when the master fires.
    AllQueued,
    /// Forced workers plus the earliest arrivals up to `S`; the rest wait.
    ExactlyS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetConfig {
    pub gamma: f64,
    /// Prior over workers; uniform when absent.
    pub prior: Option<Vec<f64>>,
    /// Explicit half-widths; `width_scale * prior` when absent.
    pub half_widths: Option<Vec<f64>>,
    pub width_scale: f64,
    /// Nominal weight; `1/N` when absent.
    pub p_bar: Option<f64>,
}

impl Default for SetConfig {
    fn default() -> Self {
        Self { gamma: 1.0, prior: None, half_widths: None, width_scale: 1.0, p_bar: None }
    }
}

impl SetConfig {
    pub fn build(&self, n: usize) -> Result<CdNormSet, UncertaintyError> {
        let q = self.prior.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let pt = self.half_widths.clone().unwrap_or_else(|| q.iter().map(|x| x * self.width_scale).collect());
        CdNormSet::new(q, pt, self.gamma, self.p_bar.unwrap_or(1.0 / n as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden layer widths for the MLP.
    pub hidden: Vec<usize>,
    /// Seed for the initial parameters.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: ModelKind::Logistic, hidden: vec![16], init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn spec(&self, dim: usize, classes: usize) -> Result<ModelSpec, ModelError> {
        match self.kind {
            ModelKind::Logistic => ModelSpec::logistic(dim, classes),
            ModelKind::Mlp => ModelSpec::mlp(dim, &self.hidden, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Minimum updates per master iteration.
    pub s: usize,
    /// Every worker is consumed at least once per `tau` iterations.
    pub tau: usize,
    /// Plane-edit period.
    pub k: usize,
    /// Plane edits and the large worker step stop at this iteration.
    pub t1: usize,
    pub max_planes: usize,
    pub t_max: usize,
    /// Mini-batch size for gradient steps; full batch when absent.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub consume: ConsumePolicy,
    pub schedules: Schedules,
    pub bounds: BoxBounds,
    pub set: SetConfig,
    pub model: ModelConfig,
    pub faults: FaultSpec,
    pub eps: f64,
    pub stop_at_eps: bool,
    pub metric_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::AspireEase,
            s: 2,
            tau: 4,
            k: 10,
            t1: 2000,
            max_planes: 10,
            t_max: 5000,
            batch_size: None,
            seed: 0,
            consume: ConsumePolicy::AllQueued,
            schedules: Schedules::default(),
            bounds: BoxBounds::default(),
            set: SetConfig::default(),
            model: ModelConfig::default(),
            faults: FaultSpec::default(),
            eps: 1e-3,
            stop_at_eps: true,
            metric_every: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, n: usize) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if n == 0 {
            return bad("no workers".into());
        }
        if self.mode != Mode::Sync && self.mode != Mode::Centralized && !(1..=n).contains(&self.s) {
            return bad(format!("s = {} must lie in 1..={n}", self.s));
        }
        if self.tau == 0 || self.k == 0 || self.max_planes == 0 || self.metric_every == 0 {
            return bad("tau, k, max_planes and metric_every must be >= 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be >= 1".into());
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return bad("eps must be nonnegative".into());
        }
        self.bounds.validate()?;
        Ok(())
    }

    fn effective_s(&self, n: usize) -> usize {
        if self.mode == Mode::Sync {
            n
        } else {
            self.s
        }
    }

    fn effective_tau(&self) -> usize {
        if self.mode == Mode::Sync {
            1
        } else {
            self.tau
        }
    }

    /// Ambiguity set actually used; `mix_even` overrides the configured one.
    pub fn resolved_set(&self, n: usize) -> Result<CdNormSet, UncertaintyError> {
        if self.mode == Mode::MixEven {
            CdNormSet::uniform(n, 0.0)
        } else {
            self.set.build(n)
        }
    }
}

/// FNV-1a over the bit patterns; identifies a parameter vector in the trace.
pub fn fingerprint(values: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest magnitude of each variable block after an update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxExtents {
    pub w: f64,
    pub z: f64,
    pub h: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    WorkerUpdate {
        worker: usize,
        stale_t: usize,
        loss: f64,
        w: u64,
        send_time: f64,
    },
    MasterIteration {
        active: Vec<usize>,
        /// Iterations since each worker was last consumed, after this one.
        staleness: Vec<usize>,
        w: Vec<u64>,
        phi: Vec<u64>,
        z: u64,
        h: f64,
        plane_ids: Vec<u64>,
        duals: Vec<f64>,
        extents: BoxExtents,
    },
    MasterBroadcast {
        workers: Vec<usize>,
    },
    PlaneAdded {
        id: u64,
        a: Vec<f64>,
    },
    PlaneDropped {
        reason: String,
    },
    PlanesPruned {
        ids: Vec<u64>,
    },
    PlaneBroadcast {
        master: Vec<u64>,
        workers: Vec<Vec<u64>>,
    },
    Metrics(IterationMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: usize,
    pub vtime: f64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<IterationMetrics>,
    pub trace: Vec<TraceEvent>,
    pub z: Vec<f64>,
    pub planes: CuttingPlaneSet,
    /// First metric iteration with gap at most `eps`.
    pub t_eps: Option<usize>,
    pub iterations: usize,
    pub vtime: f64,
    pub peak_planes: usize,
    /// Sum over iterations of the retained plane count.
    pub plane_iterations: usize,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone)]
struct Arrival {
    worker: usize,
    w: Vec<f64>,
    loss: f64,
    stale_t: usize,
    send_time: f64,
}

fn check_datasets(datasets: &[LabeledDataset]) -> Result<(usize, usize), EngineError> {
    let first = datasets.first().ok_or_else(|| EngineError::InvalidConfig("no datasets".into()))?;
    let classes = datasets.iter().map(LabeledDataset::classes).max().unwrap_or(2);
    if datasets.iter().any(|d| d.dim() != first.dim()) {
        return Err(EngineError::InvalidConfig("datasets differ in feature dimension".into()));
    }
    Ok((first.dim(), classes))
}

/// One edit round: drop inactive planes, then generate a candidate and add it
/// if it beats every surviving plane. Pruning first means a round never ends
/// with an empty set and a newborn plane is never pruned in its own round.
/// Returns whether the set changed.
fn edit_planes(
    planes: &mut CuttingPlaneSet,
    losses: &[f64],
    set: &CdNormSet,
    t: usize,
    prune: bool,
    events: &mut Vec<EventBody>,
) -> Result<bool, EngineError> {
    let mut changed = false;
    if prune {
        let removed = planes.prune_inactive();
        if !removed.is_empty() {
            changed = true;
            events.push(EventBody::PlanesPruned { ids: removed.iter().map(|p| p.id).collect() });
        }
    }
    let p_star = solve_cutting_plane_lp(losses, set)?;
    let candidate = make_plane(&p_star, set, t)?;
    if violates(&candidate, losses, planes) {
        let a = candidate.a.clone();
        match planes.add_plane(candidate) {
            Ok(id) => {
                changed = true;
                events.push(EventBody::PlaneAdded { id, a });
            }
            Err(e) => {
                warn!("iteration {t}: plane dropped: {e}");
                events.push(EventBody::PlaneDropped { reason: e.to_string() });
            }
        }
    }
    Ok(changed)
}

/// Initial plane set: the plane generated at the starting losses, carrying
/// the whole unit of dual mass, and `h` at that plane's weighted loss.
fn initial_planes(losses: &[f64], set: &CdNormSet, max_planes: usize) -> Result<(CuttingPlaneSet, f64), EngineError> {
    let p_star = solve_cutting_plane_lp(losses, set)?;
    let mut planes = CuttingPlaneSet::new(max_planes);
    planes.add_plane(make_plane(&p_star, set, 0)?)?;
    planes.planes_mut()[0].dual = 1.0;
    let h = p_star.iter().zip(losses).map(|(p, f)| p * f).sum();
    Ok((planes, h))
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    data: &'a [LabeledDataset],
    spec: ModelSpec,
    set: CdNormSet,
    schedule: ResolvedSchedule,
    delay: &'a DelayModel,
    state: SystemState,
    reported: Vec<f64>,
    last_active: Vec<usize>,
    queue: EventQueue<Arrival>,
    inbox: Vec<Arrival>,
    delay_rng: ChaCha8Rng,
    batch_rngs: Vec<ChaCha8Rng>,
    trace: Vec<TraceEvent>,
    metrics: Vec<IterationMetrics>,
    now: f64,
    t_eps: Option<usize>,
    peak_planes: usize,
    plane_iterations: usize,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a RunConfig, data: &'a [LabeledDataset], delay: &'a DelayModel) -> Result<Self, EngineError> {
        let n = data.len();
        let (dim, classes) = check_datasets(data)?;
        let spec = cfg.model.spec(dim, classes)?;
        let set = cfg.resolved_set(n)?;
        cfg.faults.validate(n, dim, classes)?;
        delay.validate(n)?;
        let schedule = ResolvedSchedule::new(cfg.schedules.clone(), cfg.t1, cfg.t_max, cfg.max_planes, n)?;
        let z0 = spec.init_params(cfg.model.init_seed).values;
        let reported = data
            .iter()
            .enumerate()
            .map(|(j, d)| local_loss(&z0, &spec, d).map(|f| cfg.faults.reported_loss(j, f)))
            .collect::<Result<Vec<_>, _>>()?;
        let (planes, h) = initial_planes(&reported, &set, cfg.max_planes)?;
        let state = SystemState::new(z0, n, h, planes);
        let mut delay_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        delay_rng.set_stream(0);
        let batch_rngs = (0..n)
            .map(|j| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                r.set_stream(j as u64 + 1);
                r
            })
            .collect();
        Ok(Self {
            cfg,
            data,
            spec,
            set,
            schedule,
            delay,
            state,
            reported,
            last_active: vec![0; n],
            queue: EventQueue::new(),
            inbox: Vec::new(),
            delay_rng,
            batch_rngs,
            trace: Vec::new(),
            metrics: Vec::new(),
            now: 0.0,
            t_eps: None,
            peak_planes: 0,
            plane_iterations: 0,
        })
    }

    fn n(&self) -> usize {
        self.data.len()
    }

    fn record(&mut self, body: EventBody) {
        self.trace.push(TraceEvent { t: self.state.t, vtime: self.now, body });
    }

    /// Worker `j` computes its next update from its snapshot and ships it.
    fn send(&mut self, j: usize) -> Result<(), EngineError> {
        let snapshot = &self.state.snapshots[j];
        let w = &self.state.w[j];
        let batch = match self.cfg.batch_size {
            Some(m) => Some(sample_batch_with(self.data[j].len(), m.min(self.data[j].len()), &mut self.batch_rngs[j])?),
            None => None,
        };
        let (_, grad) = local_loss_and_grad(w, &self.spec, &self.data[j], batch.as_deref())?;
        let alpha = self.schedule.at(snapshot.t, snapshot.planes.len()).alpha_w;
        let p_bar = self.set.p_bar();
        let w_new = worker_update(j, snapshot, w, &self.state.phi[j], &grad, alpha, p_bar, &self.cfg.bounds);
        let loss = self.cfg.faults.reported_loss(j, local_loss(&w_new, &self.spec, &self.data[j])?);
        if !loss.is_finite() {
            return Err(EngineError::Protocol(format!("worker {j} produced a non-finite loss")));
        }
        let delay = sample_delay(self.delay, j, &mut self.delay_rng);
        let stale_t = snapshot.t;
        self.queue.push(self.now + delay, Arrival { worker: j, w: w_new, loss, stale_t, send_time: self.now });
        Ok(())
    }

    fn forced(&self) -> Vec<usize> {
        enforce_staleness(&self.last_active, self.state.t, self.cfg.effective_tau())
    }

    fn can_fire(&self) -> bool {
        let s = self.cfg.effective_s(self.n());
        self.inbox.len() >= s && self.forced().iter().all(|j| self.inbox.iter().any(|m| m.worker == *j))
    }

    fn take_active(&mut self) -> Vec<Arrival> {
        match self.cfg.consume {
            ConsumePolicy::AllQueued => std::mem::take(&mut self.inbox),
            ConsumePolicy::ExactlyS => {
                let forced = self.forced();
                let s = self.cfg.effective_s(self.n());
                let mut room = s.saturating_sub(forced.len());
                let mut taken = Vec::new();
                let mut kept = Vec::new();
                for m in std::mem::take(&mut self.inbox) {
                    if forced.contains(&m.worker) {
                        taken.push(m);
                    } else if room > 0 {
                        room -= 1;
                        taken.push(m);
                    } else {
                        kept.push(m);
                    }
                }
                self.inbox = kept;
                taken
            }
        }
    }

    fn master_iteration(&mut self) -> Result<(), EngineError> {
        let mut active = self.take_active();
        if active.len() < self.cfg.effective_s(self.n()) {
            return Err(EngineError::Protocol(format!("{} updates for s = {}", active.len(), self.cfg.s)));
        }
        active.sort_by_key(|m| m.worker);
        let t = self.state.t;
        let ids: Vec<usize> = active.iter().map(|m| m.worker).collect();
        for m in active {
            self.state.w[m.worker] = m.w;
            self.reported[m.worker] = m.loss;
            self.last_active[m.worker] = t + 1;
        }
        let steps = self.schedule.at(t, self.state.planes.len());
        let p_bar = self.set.p_bar();
        master_update(&mut self.state, &self.reported, &steps, p_bar, &self.cfg.bounds)?;
        for &j in &ids {
            self.state.phi[j] =
                phi_update(&self.state.z, &self.state.w[j], &self.state.phi[j], steps.rho2, steps.c2, self.cfg.bounds.alpha4);
        }
        self.state.t = t + 1;

        let mut edits = Vec::new();
        let edit_round = self.cfg.mode.generates_planes() && (t + 1).is_multiple_of(self.cfg.k) && t < self.cfg.t1;
        let changed = edit_round
            && edit_planes(&mut self.state.planes, &self.reported, &self.set, t + 1, self.cfg.mode.prunes(), &mut edits)?;

        let n = self.n();
        let staleness = (0..n).map(|j| t + 1 - self.last_active[j]).collect();
        let body = EventBody::MasterIteration {
            active: ids.clone(),
            staleness,
            w: self.state.w.iter().map(|w| fingerprint(w)).collect(),
            phi: self.state.phi.iter().map(|p| fingerprint(p)).collect(),
            z: fingerprint(&self.state.z),
            h: self.state.h,
            plane_ids: self.state.planes.ids(),
            duals: self.state.planes.duals(),
            extents: extents(&self.state),
        };
        self.record(body);
        for e in edits {
            self.record(e);
        }
        for &j in &ids {
            self.state.snapshots[j] = WorkerSnapshot {
                z: self.state.z.clone(),
                h: self.state.h,
                planes: self.state.planes.clone(),
                t: t + 1,
            };
        }
        self.record(EventBody::MasterBroadcast { workers: ids.clone() });
        if changed {
            for snap in &mut self.state.snapshots {
                snap.planes = self.state.planes.clone();
            }
            let workers = self.state.snapshots.iter().map(|s| s.planes.ids()).collect();
            self.record(EventBody::PlaneBroadcast { master: self.state.planes.ids(), workers });
        }
        for &j in &ids {
            self.send(j)?;
        }
        self.peak_planes = self.peak_planes.max(self.state.planes.len());
        self.plane_iterations += self.state.planes.len();
        if (t + 1).is_multiple_of(self.cfg.metric_every) || t + 1 == self.cfg.t_max {
            self.measure()?;
        }
        Ok(())
    }

    fn measure(&mut self) -> Result<(), EngineError> {
        let n = self.n();
        let grads = (0..n)
            .map(|j| local_loss_and_grad(&self.state.w[j], &self.spec, &self.data[j], None).map(|(_, g)| g))
            .collect::<Result<Vec<_>, _>>()?;
        let steps = self.schedule.at(self.state.t, self.state.planes.len());
        let gap = stationarity_gap(&self.state, &self.reported, &grads, &steps, self.set.p_bar(), &self.cfg.bounds)?;
        let row = consensus_row(
            self.state.t,
            self.now,
            gap,
            &self.state.z,
            &self.spec,
            self.data,
            &self.state.planes,
            &self.cfg.faults,
            self.set.p_bar(),
        )?;
        self.record_metrics(row);
        Ok(())
    }

    fn record_metrics(&mut self, row: IterationMetrics) {
        if self.t_eps.is_none() && crate::metrics::is_eps_stationary(row.gap, self.cfg.eps) {
            self.t_eps = Some(row.t);
        }
        debug!("t = {} gap = {:.3e} worst = {:.4}", row.t, row.gap, row.worst_loss);
        self.record(EventBody::Metrics(row.clone()));
        self.metrics.push(row);
    }

    fn done(&self) -> bool {
        self.state.t >= self.cfg.t_max || (self.cfg.stop_at_eps && self.t_eps.is_some())
    }

    fn run(mut self) -> Result<RunOutput, EngineError> {
        self.peak_planes = self.state.planes.len();
        self.measure()?;
        for j in 0..self.n() {
            self.send(j)?;
        }
        while !self.done() {
            let (time, first) = self
                .queue
                .next_event()
                .ok_or_else(|| EngineError::Protocol("event queue drained".into()))?;
            self.now = time;
            let mut batch = vec![first];
            while self.queue.peek_time() == Some(time) {
                batch.extend(self.queue.next_event().map(|(_, m)| m));
            }
            for m in batch {
                self.record(EventBody::WorkerUpdate {
                    worker: m.worker,
                    stale_t: m.stale_t,
                    loss: m.loss,
                    w: fingerprint(&m.w),
                    send_time: m.send_time,
                });
                self.inbox.push(m);
            }
            while !self.done() && self.can_fire() {
                self.master_iteration()?;
            }
        }
        if self.metrics.last().map(|r| r.t) != Some(self.state.t) {
            self.measure()?;
        }
        Ok(RunOutput {
            metrics: self.metrics,
            trace: self.trace,
            z: self.state.z,
            planes: self.state.planes,
            t_eps: self.t_eps,
            iterations: self.state.t,
            vtime: self.now,
            peak_planes: self.peak_planes,
            plane_iterations: self.plane_iterations,
            spec: self.spec,
        })
    }
}

fn extents(state: &SystemState) -> BoxExtents {
    let duals = state.planes.duals();
    BoxExtents {
        w: state.w.iter().map(|w| inf_norm(w)).fold(0.0, f64::max),
        z: inf_norm(&state.z),
        h: state.h,
        lambda_min: duals.iter().cloned().fold(f64::INFINITY, f64::min),
        lambda_max: duals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        phi: state.phi.iter().map(|p| inf_norm(p)).fold(0.0, f64::max),
    }
}

/// Metric row with losses and accuracies evaluated at the consensus model.
#[allow(clippy::too_many_arguments)]
fn consensus_row(
    t: usize,
    vtime: f64,
    gap: f64,
    z: &[f64],
    spec: &ModelSpec,
    data: &[LabeledDataset],
    planes: &CuttingPlaneSet,
    faults: &FaultSpec,
    p_bar: f64,
) -> Result<IterationMetrics, EngineError> {
    let losses = data.iter().map(|d| local_loss(z, spec, d)).collect::<Result<Vec<_>, _>>()?;
    let accs = data.iter().map(|d| accuracy(z, spec, d)).collect::<Result<Vec<_>, _>>()?;
    let (worst_loss, worst_acc, acc_std) = worst_case_stats(&losses, &accs);
    Ok(IterationMetrics {
        t,
        vtime,
        gap,
        losses,
        worst_loss,
        worst_acc,
        acc_std,
        planes: planes.len(),
        sum_lambda: planes.dual_sum(),
        duals: planes.duals(),
        mal_weight: malicious_weight_share(planes, &faults.malicious, data.len(), p_bar),
    })
}

/// Workers that must be consumed at iteration `t + 1` so that none goes
/// `tau` iterations without being consumed.
pub fn enforce_staleness(last_active: &[usize], t: usize, tau: usize) -> Vec<usize> {
    (0..last_active.len()).filter(|&j| t + 1 - last_active[j] >= tau).collect()
}

/// Runs the distributed protocol (or the centralized variant when
/// `config.mode` asks for it).
pub fn run(config: &RunConfig, datasets: &[LabeledDataset], delay: &DelayModel) -> Result<RunOutput, EngineError> {
    config.validate(datasets.len())?;
    if config.mode == Mode::Centralized {
        return run_centralized(config, datasets);
    }
    Engine::new(config, datasets, delay)?.run()
}

/// Single-model projected primal-dual iteration over `w, h, lambda`, one unit
/// of virtual time per iteration.
pub fn run_centralized(config: &RunConfig, datasets: &[LabeledDataset]) -> Result<RunOutput, EngineError> {
    config.validate(datasets.len())?;
    let n = datasets.len();
    let (dim, classes) = check_datasets(datasets)?;
    let spec = config.model.spec(dim, classes)?;
    let set = config.set.build(n)?;
    let schedule = ResolvedSchedule::new(config.schedules.clone(), config.t1, config.t_max, config.max_planes, n)?;
    let bounds = config.bounds;
    let p_bar = set.p_bar();
    let faults = &config.faults;
    let eval = |w: &[f64]| -> Result<(Vec<f64>, Vec<Vec<f64>>), EngineError> {
        let mut losses = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for (j, d) in datasets.iter().enumerate() {
            let (f, g) = local_loss_and_grad(w, &spec, d, None)?;
            losses.push(faults.reported_loss(j, f));
            grads.push(g);
        }
        Ok((losses, grads))
    };
    let w0 = spec.init_params(config.model.init_seed).values;
    let (mut losses, mut grads) = eval(&w0)?;
    let (planes, h) = initial_planes(&losses, &set, config.max_planes)?;
    let mut state = CentralState { w: w0, h, planes };
    let mut trace = Vec::new();
    let mut metrics = Vec::new();
    let mut t_eps = None;
    let mut peak_planes = state.planes.len();
    let mut plane_iterations = 0;
    let mut t = 0;
    let mut measure = |t: usize, state: &CentralState, losses: &[f64], grads: &[Vec<f64>], trace: &mut Vec<TraceEvent>| -> Result<bool, EngineError> {
        let steps = schedule.at(t, state.planes.len());
        let gap = central_stationarity_gap(state, losses, grads, &steps, p_bar, &bounds)?;
        let row = consensus_row(t, t as f64, gap, &state.w, &spec, datasets, &state.planes, faults, p_bar)?;
        let hit = crate::metrics::is_eps_stationary(gap, config.eps);
        trace.push(TraceEvent { t, vtime: t as f64, body: EventBody::Metrics(row.clone()) });
        metrics.push(row);
        Ok(hit)
    };
    if measure(0, &state, &losses, &grads, &mut trace)? {
        t_eps = Some(0);
    }
    while t < config.t_max && !(config.stop_at_eps && t_eps.is_some()) {
        let steps = schedule.at(t, state.planes.len());
        let (gw, _, _) = central_gradient(&state, &losses, &grads, p_bar, steps.c1);
        for (w, g) in state.w.iter_mut().zip(gw) {
            *w = project_scalar(*w - steps.alpha_w * g, bounds.alpha1, false);
        }
        (losses, grads) = eval(&state.w)?;
        let gh = 1.0 - state.planes.dual_sum();
        state.h = project_scalar(state.h - steps.eta_h * gh, bounds.alpha2, true);
        let (_, _, gl) = central_gradient(&state, &losses, &grads, p_bar, steps.c1);
        for (plane, g) in state.planes.planes_mut().iter_mut().zip(gl) {
            plane.prev_dual = plane.dual;
            plane.dual = project_scalar(plane.dual + steps.rho1 * g, bounds.alpha3, true);
        }
        t += 1;
        let mut edits = Vec::new();
        if config.mode.generates_planes() && t % config.k == 0 && t - 1 < config.t1 {
            edit_planes(&mut state.planes, &losses, &set, t, true, &mut edits)?;
        }
        let duals = state.planes.duals();
        trace.push(TraceEvent {
            t,
            vtime: t as f64,
            body: EventBody::MasterIteration {
                active: (0..n).collect(),
                staleness: vec![0; n],
                w: vec![fingerprint(&state.w)],
                phi: Vec::new(),
                z: fingerprint(&state.w),
                h: state.h,
                plane_ids: state.planes.ids(),
                duals: duals.clone(),
                extents: BoxExtents {
                    w: inf_norm(&state.w),
                    z: inf_norm(&state.w),
                    h: state.h,
                    lambda_min: duals.iter().cloned().fold(f64::INFINITY, f64::min),
                    lambda_max: duals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    phi: 0.0,
                },
            },
        });
        trace.extend(edits.into_iter().map(|body| TraceEvent { t, vtime: t as f64, body }));
        peak_planes = peak_planes.max(state.planes.len());
        plane_iterations += state.planes.len();
        if (t % config.metric_every == 0 || t == config.t_max) && measure(t, &state, &losses, &grads, &mut trace)? && t_eps.is_none() {
            t_eps = Some(t);
        }
    }
    if metrics_last_t(&trace) != Some(t) {
        measure(t, &state, &losses, &grads, &mut trace)?;
    }
    Ok(RunOutput {
        metrics,
        trace,
        z: state.w,
        planes: state.planes,
        t_eps,
        iterations: t,
        vtime: t as f64,
        peak_planes,
        plane_iterations,
        spec,
    })
}

fn metrics_last_t(trace: &[TraceEvent]) -> Option<usize> {
    trace.iter().rev().find_map(|e| match &e.body {
        EventBody::Metrics(r) => Some(r.t),
        _ => None,
    })
}
