//! Stationarity gap, worst-case statistics, adversarial weight and backdoor
//! success rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lagrangian::{block_gradient, project_scalar, Block, BlockInputs, BoxBounds, CentralState, LagrangianError, StepSizes, SystemState};
use crate::models::{predict, LabeledDataset, ModelError, ModelSpec};
use crate::uncertainty::CuttingPlaneSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty backdoor test set")]
    EmptySet,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// One row of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub t: usize,
    pub vtime: f64,
    pub gap: f64,
    pub losses: Vec<f64>,
    pub worst_loss: f64,
    pub worst_acc: f64,
    pub acc_std: f64,
    pub planes: usize,
    pub sum_lambda: f64,
    pub duals: Vec<f64>,
    pub mal_weight: f64,
}

/// `(x - P(x - step * g)) / step` for descent blocks, or with `+` for ascent.
fn residual(out: &mut Vec<f64>, x: &[f64], g: &[f64], step: f64, radius: f64, lower_zero: bool, ascent: bool) {
    let sign = if ascent { 1.0 } else { -1.0 };
    out.extend(
        x.iter()
            .zip(g)
            .map(|(&xi, &gi)| (xi - project_scalar(xi + sign * step * gi, radius, lower_zero)) / step),
    );
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Concatenated projected-gradient residuals of the unregularized
/// Lagrangian, in block order `w_1..w_N, z, h, lambda, phi_1..phi_N`.
pub fn gap_residuals(
    state: &SystemState,
    losses: &[f64],
    grads: &[Vec<f64>],
    steps: &StepSizes,
    p_bar: f64,
    bounds: &BoxBounds,
) -> Result<Vec<f64>, MetricsError> {
    let inputs = BlockInputs { losses, grads };
    let k = bounds.kappa1;
    let n = state.workers();
    let mut out = Vec::new();
    for j in 0..n {
        let g = block_gradient(Block::W(j), state, inputs, p_bar, k, None)?;
        residual(&mut out, &state.w[j], &g, steps.alpha_w, bounds.alpha1, false, false);
    }
    let g = block_gradient(Block::Z, state, inputs, p_bar, k, None)?;
    residual(&mut out, &state.z, &g, steps.eta_z, bounds.alpha1, false, false);
    let g = block_gradient(Block::H, state, inputs, p_bar, k, None)?;
    residual(&mut out, &[state.h], &g, steps.eta_h, bounds.alpha2, true, false);
    let duals = state.planes.duals();
    for (l, dual) in duals.iter().enumerate() {
        let g = block_gradient(Block::Lambda(l), state, inputs, p_bar, k, None)?;
        residual(&mut out, &[*dual], &g, steps.rho1, bounds.alpha3, true, true);
    }
    for j in 0..n {
        let g = block_gradient(Block::Phi(j), state, inputs, p_bar, k, None)?;
        residual(&mut out, &state.phi[j], &g, steps.rho2, bounds.alpha4, false, true);
    }
    Ok(out)
}

/// Euclidean norm of [`gap_residuals`].
pub fn stationarity_gap(
    state: &SystemState,
    losses: &[f64],
    grads: &[Vec<f64>],
    steps: &StepSizes,
    p_bar: f64,
    bounds: &BoxBounds,
) -> Result<f64, MetricsError> {
    Ok(norm(&gap_residuals(state, losses, grads, steps, p_bar, bounds)?))
}

/// Gap of the single-model problem over blocks `w, h, lambda`.
pub fn central_stationarity_gap(
    state: &CentralState,
    losses: &[f64],
    grads: &[Vec<f64>],
    steps: &StepSizes,
    p_bar: f64,
    bounds: &BoxBounds,
) -> Result<f64, MetricsError> {
    if grads.len() != losses.len() || grads.iter().any(|g| g.len() != state.w.len()) {
        return Err(MetricsError::Dimension("gradient shapes".into()));
    }
    let (gw, gh, gl) = crate::lagrangian::central_gradient(state, losses, grads, p_bar, 0.0);
    let mut out = Vec::new();
    residual(&mut out, &state.w, &gw, steps.alpha_w, bounds.alpha1, false, false);
    residual(&mut out, &[state.h], &[gh], steps.eta_h, bounds.alpha2, true, false);
    residual(&mut out, &state.planes.duals(), &gl, steps.rho1, bounds.alpha3, true, true);
    Ok(norm(&out))
}

pub fn is_eps_stationary(gap: f64, eps: f64) -> bool {
    gap <= eps
}

/// First iteration whose recorded gap is at most `eps`.
pub fn first_stationary(records: &[IterationMetrics], eps: f64) -> Option<usize> {
    records.iter().find(|r| is_eps_stationary(r.gap, eps)).map(|r| r.t)
}

/// `(max loss, min accuracy, population std of accuracies)`.
pub fn worst_case_stats(losses: &[f64], accuracies: &[f64]) -> (f64, f64, f64) {
    let worst_loss = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let worst_acc = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (worst_loss, worst_acc, var.sqrt())
}

/// Fraction of the backdoor set classified as `target`.
pub fn attack_success_rate(
    params: &[f64],
    spec: &ModelSpec,
    backdoor_set: &LabeledDataset,
    target: usize,
) -> Result<f64, MetricsError> {
    if backdoor_set.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let predicted = predict(params, spec, backdoor_set)?;
    Ok(predicted.iter().filter(|&&y| y == target).count() as f64 / predicted.len() as f64)
}

/// Dual-weighted mass `sum_l lambda_l (p_bar + a_l,j) / sum_l lambda_l` on the
/// given workers; the nominal mass when every dual is zero.
pub fn malicious_weight_share(planes: &CuttingPlaneSet, malicious: &[usize], workers: usize, p_bar: f64) -> f64 {
    if malicious.is_empty() {
        return 0.0;
    }
    let total = planes.dual_sum();
    if total <= 0.0 {
        return p_bar * malicious.len() as f64;
    }
    let weights = planes.effective_weights(workers, p_bar);
    malicious.iter().map(|&j| weights[j]).sum::<f64>() / total
}
