//! Augmented Lagrangian of the epigraph problem, its regularized form, block
//! gradients, box projections and the projected primal-dual update rules.
//!
//! ```text
//! L_p  = h + sum_l lambda_l (sum_j (p_bar + a_lj) f_j(w_j) - h)
//!          + sum_j phi_j^T (z - w_j) + sum_j kappa1/2 |z - w_j|^2
//! L~_p = L_p - sum_l c1/2 lambda_l^2 - sum_j c2/2 |phi_j|^2
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uncertainty::CuttingPlaneSet;

#[derive(Debug, Error, PartialEq)]
pub enum LagrangianError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown block {0:?}")]
    UnknownBlock(Block),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Box radii for W/Z, H, Lambda, Phi and the consensus penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxBounds {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub kappa1: f64,
}

impl Default for BoxBounds {
    fn default() -> Self {
        Self { alpha1: 10.0, alpha2: 50.0, alpha3: 5.0, alpha4: 5.0, kappa1: 1.0 }
    }
}

impl BoxBounds {
    pub fn validate(&self) -> Result<(), LagrangianError> {
        let all = [self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.kappa1];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(LagrangianError::InvalidBounds(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Fixed step sizes and regularizers.
    Constant,
    /// `c(t) = 1/(rho (t+1)^(1/6))` floored at its horizon value, and step sizes
    /// from the iteration-complexity formula with a user-supplied smoothness
    /// estimate.
    Decaying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub mode: ScheduleMode,
    pub eta_w: f64,
    pub eta_z: f64,
    pub eta_h: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub c1: f64,
    pub c2: f64,
    /// Smoothness estimate used by [`ScheduleMode::Decaying`].
    pub lipschitz: f64,
    /// Constant multiplying the regularizer terms of the decaying step size.
    pub gamma: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Constant,
            eta_w: 0.05,
            eta_z: 0.05,
            eta_h: 0.05,
            rho1: 0.05,
            rho2: 0.05,
            c1: 1e-3,
            c2: 1e-3,
            lipschitz: 1.0,
            gamma: 1.0,
        }
    }
}

/// Step sizes and regularizers in force at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub alpha_w: f64,
    pub eta_z: f64,
    pub eta_h: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub c1: f64,
    pub c2: f64,
}

/// A schedule bound to the run's horizon and problem sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSchedule {
    pub schedules: Schedules,
    pub t1: usize,
    pub t_max: usize,
    pub max_planes: usize,
    pub workers: usize,
}

impl ResolvedSchedule {
    pub fn new(schedules: Schedules, t1: usize, t_max: usize, max_planes: usize, workers: usize) -> Result<Self, LagrangianError> {
        let s = &schedules;
        let positive = [s.eta_w, s.eta_z, s.eta_h, s.rho1, s.rho2, s.lipschitz];
        if positive.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(LagrangianError::InvalidSchedule("step sizes must be positive".into()));
        }
        if !(s.c1 >= 0.0 && s.c2 >= 0.0 && s.gamma >= 0.0) {
            return Err(LagrangianError::InvalidSchedule("regularizers must be nonnegative".into()));
        }
        Ok(Self { schedules, t1, t_max, max_planes, workers })
    }

    fn decay_c(rho: f64, t: usize) -> f64 {
        1.0 / (rho * ((t + 1) as f64).powf(1.0 / 6.0))
    }

    pub fn c1(&self, t: usize) -> f64 {
        match self.schedules.mode {
            ScheduleMode::Constant => self.schedules.c1,
            ScheduleMode::Decaying => {
                let floor = Self::decay_c(self.schedules.rho1, self.t_max);
                Self::decay_c(self.schedules.rho1, t).max(floor)
            }
        }
    }

    pub fn c2(&self, t: usize) -> f64 {
        match self.schedules.mode {
            ScheduleMode::Constant => self.schedules.c2,
            ScheduleMode::Decaying => {
                let floor = Self::decay_c(self.schedules.rho2, self.t_max);
                Self::decay_c(self.schedules.rho2, t).max(floor)
            }
        }
    }

    fn decay_eta(&self, planes: usize, c1: f64, c2: f64) -> f64 {
        let s = &self.schedules;
        let (l, n, m) = (s.lipschitz, self.workers as f64, planes as f64);
        let l2 = l * l;
        2.0 / (l
            + s.rho1 * m * l2
            + s.rho2 * n * l2
            + 8.0 * (m * s.gamma * l2 / (s.rho1 * c1 * c1) + n * s.gamma * l2 / (s.rho2 * c2 * c2)))
    }

    /// Floor step for the local models, used from iteration `t1` on.
    pub fn eta_w_floor(&self) -> f64 {
        match self.schedules.mode {
            ScheduleMode::Constant => self.schedules.eta_w,
            ScheduleMode::Decaying => self.decay_eta(self.max_planes, self.c1(self.t_max), self.c2(self.t_max)),
        }
    }

    pub fn at(&self, t: usize, planes: usize) -> StepSizes {
        let s = &self.schedules;
        let (c1, c2) = (self.c1(t), self.c2(t));
        let (eta_w, eta_z, eta_h) = match s.mode {
            ScheduleMode::Constant => (s.eta_w, s.eta_z, s.eta_h),
            ScheduleMode::Decaying if t >= self.t1 => {
                let floor = self.eta_w_floor();
                (floor, floor, floor)
            }
            ScheduleMode::Decaying => {
                let eta = self.decay_eta(planes.max(1), c1, c2);
                (eta, eta, eta)
            }
        };
        let alpha_w = if t < self.t1 { eta_w } else { self.eta_w_floor() };
        StepSizes { alpha_w, eta_z, eta_h, rho1: s.rho1, rho2: s.rho2, c1, c2 }
    }
}

/// Copy of the master variables a worker last received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSnapshot {
    pub z: Vec<f64>,
    pub h: f64,
    pub planes: CuttingPlaneSet,
    /// Iteration at which the snapshot was taken.
    pub t: usize,
}

/// All primal and dual variables at one master iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub w: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub h: f64,
    pub planes: CuttingPlaneSet,
    pub phi: Vec<Vec<f64>>,
    pub t: usize,
    pub snapshots: Vec<WorkerSnapshot>,
}

impl SystemState {
    /// Every worker starts from `z0` with zero consensus duals.
    pub fn new(z0: Vec<f64>, workers: usize, h: f64, planes: CuttingPlaneSet) -> Self {
        let p = z0.len();
        let snapshot = WorkerSnapshot { z: z0.clone(), h, planes: planes.clone(), t: 0 };
        Self {
            w: vec![z0.clone(); workers],
            z: z0,
            h,
            planes,
            phi: vec![vec![0.0; p]; workers],
            t: 0,
            snapshots: vec![snapshot; workers],
        }
    }

    pub fn workers(&self) -> usize {
        self.w.len()
    }

    fn check(&self, losses: &[f64]) -> Result<(), LagrangianError> {
        let n = self.workers();
        if losses.len() != n || self.phi.len() != n {
            return Err(LagrangianError::Dimension(format!(
                "{} losses, {} duals for {n} workers",
                losses.len(),
                self.phi.len()
            )));
        }
        let p = self.z.len();
        if self.w.iter().chain(&self.phi).any(|v| v.len() != p) {
            return Err(LagrangianError::Dimension("parameter length differs from z".into()));
        }
        if self.planes.planes().iter().any(|pl| pl.a.len() != n) {
            return Err(LagrangianError::Dimension("plane length differs from worker count".into()));
        }
        Ok(())
    }

    /// True when every variable lies in its box.
    pub fn is_feasible(&self, bounds: &BoxBounds) -> bool {
        let within = |v: &[f64], r: f64| v.iter().all(|x| x.abs() <= r);
        self.w.iter().all(|w| within(w, bounds.alpha1))
            && within(&self.z, bounds.alpha1)
            && (0.0..=bounds.alpha2).contains(&self.h)
            && self.planes.planes().iter().all(|p| (0.0..=bounds.alpha3).contains(&p.dual))
            && self.phi.iter().all(|f| within(f, bounds.alpha4))
    }
}

/// Regularizer weights; `None` wherever the plain `L_p` is wanted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub c1: f64,
    pub c2: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sum_j (p_bar + a_lj) f_j - h` for plane `l`.
fn slack(planes: &CuttingPlaneSet, l: usize, losses: &[f64], p_bar: f64, h: f64) -> f64 {
    let plane = &planes.planes()[l];
    losses.iter().enumerate().map(|(j, f)| plane.weight(j, p_bar) * f).sum::<f64>() - h
}

pub fn lagrangian_value(state: &SystemState, losses: &[f64], p_bar: f64, kappa1: f64) -> Result<f64, LagrangianError> {
    state.check(losses)?;
    let mut value = state.h;
    for (l, plane) in state.planes.planes().iter().enumerate() {
        value += plane.dual * slack(&state.planes, l, losses, p_bar, state.h);
    }
    for (w, phi) in state.w.iter().zip(&state.phi) {
        let diff: Vec<f64> = state.z.iter().zip(w).map(|(z, w)| z - w).collect();
        value += dot(phi, &diff) + 0.5 * kappa1 * sq_dist(&state.z, w);
    }
    Ok(value)
}

pub fn regularized_value(
    state: &SystemState,
    losses: &[f64],
    p_bar: f64,
    kappa1: f64,
    reg: Regularization,
) -> Result<f64, LagrangianError> {
    let base = lagrangian_value(state, losses, p_bar, kappa1)?;
    let lambda_sq: f64 = state.planes.planes().iter().map(|p| p.dual * p.dual).sum();
    let phi_sq: f64 = state.phi.iter().map(|f| dot(f, f)).sum();
    Ok(base - 0.5 * reg.c1 * lambda_sq - 0.5 * reg.c2 * phi_sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    W(usize),
    Z,
    H,
    Lambda(usize),
    Phi(usize),
}

/// Worker losses and loss gradients at the current local models.
#[derive(Debug, Clone, Copy)]
pub struct BlockInputs<'a> {
    pub losses: &'a [f64],
    /// `grad f_j(w_j)`; only read for [`Block::W`].
    pub grads: &'a [Vec<f64>],
}

/// Partial gradient of `L_p` (or `L~_p` when `reg` is given) with respect to
/// one block.
pub fn block_gradient(
    block: Block,
    state: &SystemState,
    inputs: BlockInputs<'_>,
    p_bar: f64,
    kappa1: f64,
    reg: Option<Regularization>,
) -> Result<Vec<f64>, LagrangianError> {
    state.check(inputs.losses)?;
    let n = state.workers();
    match block {
        Block::W(j) if j < n => {
            let grad_f = inputs
                .grads
                .get(j)
                .filter(|g| g.len() == state.z.len())
                .ok_or_else(|| LagrangianError::Dimension(format!("missing loss gradient for worker {j}")))?;
            let weight: f64 = state.planes.planes().iter().map(|p| p.dual * p.weight(j, p_bar)).sum();
            Ok(local_direction(weight, grad_f, &state.phi[j], &state.z, &state.w[j], kappa1))
        }
        Block::Z => {
            let mut g = vec![0.0; state.z.len()];
            for (w, phi) in state.w.iter().zip(&state.phi) {
                for k in 0..g.len() {
                    g[k] += phi[k] + kappa1 * (state.z[k] - w[k]);
                }
            }
            Ok(g)
        }
        Block::H => Ok(vec![1.0 - state.planes.dual_sum()]),
        Block::Lambda(l) if l < state.planes.len() => {
            let mut g = slack(&state.planes, l, inputs.losses, p_bar, state.h);
            if let Some(r) = reg {
                g -= r.c1 * state.planes.planes()[l].dual;
            }
            Ok(vec![g])
        }
        Block::Phi(j) if j < n => {
            let c2 = reg.map_or(0.0, |r| r.c2);
            Ok((0..state.z.len()).map(|k| state.z[k] - state.w[j][k] - c2 * state.phi[j][k]).collect())
        }
        other => Err(LagrangianError::UnknownBlock(other)),
    }
}

/// `weight * grad f - phi - kappa1 (z - w)`.
fn local_direction(weight: f64, grad_f: &[f64], phi: &[f64], z: &[f64], w: &[f64], kappa1: f64) -> Vec<f64> {
    (0..w.len()).map(|k| weight * grad_f[k] - phi[k] - kappa1 * (z[k] - w[k])).collect()
}

/// Clamp to `[-radius, radius]`, or `[0, radius]` with `lower_zero`.
pub fn project_box(v: &[f64], radius: f64, lower_zero: bool) -> Vec<f64> {
    v.iter().map(|&x| project_scalar(x, radius, lower_zero)).collect()
}

pub fn project_scalar(x: f64, radius: f64, lower_zero: bool) -> f64 {
    let lo = if lower_zero { 0.0 } else { -radius };
    x.clamp(lo, radius)
}

/// Active worker step on its local model against the (possibly stale)
/// master snapshot.
#[allow(clippy::too_many_arguments)]
pub fn worker_update(
    j: usize,
    snapshot: &WorkerSnapshot,
    w: &[f64],
    phi: &[f64],
    grad_f: &[f64],
    alpha_w: f64,
    p_bar: f64,
    bounds: &BoxBounds,
) -> Vec<f64> {
    let weight: f64 = snapshot.planes.planes().iter().map(|p| p.dual * p.weight(j, p_bar)).sum();
    let dir = local_direction(weight, grad_f, phi, &snapshot.z, w, bounds.kappa1);
    w.iter().zip(dir).map(|(x, d)| project_scalar(x - alpha_w * d, bounds.alpha1, false)).collect()
}

/// Master step: `z`, then `h` with the new `z`, then every `lambda_l` with the
/// new `h`. `state.w` must already hold the freshest local models and `losses`
/// the freshest reported losses.
pub fn master_update(
    state: &mut SystemState,
    losses: &[f64],
    steps: &StepSizes,
    p_bar: f64,
    bounds: &BoxBounds,
) -> Result<(), LagrangianError> {
    let reg = Some(Regularization { c1: steps.c1, c2: steps.c2 });
    let inputs = BlockInputs { losses, grads: &[] };
    let gz = block_gradient(Block::Z, state, inputs, p_bar, bounds.kappa1, reg)?;
    for (z, g) in state.z.iter_mut().zip(gz) {
        *z = project_scalar(*z - steps.eta_z * g, bounds.alpha1, false);
    }
    let gh = block_gradient(Block::H, state, inputs, p_bar, bounds.kappa1, reg)?[0];
    state.h = project_scalar(state.h - steps.eta_h * gh, bounds.alpha2, true);
    let grads: Vec<f64> = (0..state.planes.len())
        .map(|l| block_gradient(Block::Lambda(l), state, inputs, p_bar, bounds.kappa1, reg).map(|g| g[0]))
        .collect::<Result<_, _>>()?;
    for (plane, g) in state.planes.planes_mut().iter_mut().zip(grads) {
        plane.prev_dual = plane.dual;
        plane.dual = project_scalar(plane.dual + steps.rho1 * g, bounds.alpha3, true);
    }
    Ok(())
}

/// Consensus-dual ascent step for an active worker.
pub fn phi_update(z: &[f64], w: &[f64], phi: &[f64], rho2: f64, c2: f64, alpha4: f64) -> Vec<f64> {
    (0..phi.len())
        .map(|k| project_scalar(phi[k] + rho2 * (z[k] - w[k] - c2 * phi[k]), alpha4, false))
        .collect()
}

/// Variables of the single-model problem solved without consensus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralState {
    pub w: Vec<f64>,
    pub h: f64,
    pub planes: CuttingPlaneSet,
}

/// `h + sum_l lambda_l (sum_j (p_bar + a_lj) f_j(w) - h) - sum_l c1/2 lambda_l^2`.
pub fn central_value(state: &CentralState, losses: &[f64], p_bar: f64, c1: f64) -> f64 {
    let mut value = state.h;
    for (l, plane) in state.planes.planes().iter().enumerate() {
        value += plane.dual * slack(&state.planes, l, losses, p_bar, state.h) - 0.5 * c1 * plane.dual * plane.dual;
    }
    value
}

/// Gradients `(w, h, lambda)` of the centralized Lagrangian; `grads[j]` is
/// `grad f_j(w)`.
pub fn central_gradient(
    state: &CentralState,
    losses: &[f64],
    grads: &[Vec<f64>],
    p_bar: f64,
    c1: f64,
) -> (Vec<f64>, f64, Vec<f64>) {
    let n = losses.len();
    let weights = state.planes.effective_weights(n, p_bar);
    let mut gw = vec![0.0; state.w.len()];
    for (weight, g) in weights.iter().zip(grads) {
        for (acc, gk) in gw.iter_mut().zip(g) {
            *acc += weight * gk;
        }
    }
    let gh = 1.0 - state.planes.dual_sum();
    let gl = state
        .planes
        .planes()
        .iter()
        .enumerate()
        .map(|(l, p)| slack(&state.planes, l, losses, p_bar, state.h) - c1 * p.dual)
        .collect();
    (gw, gh, gl)
}
