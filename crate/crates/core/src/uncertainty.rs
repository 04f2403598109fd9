//! CD-norm ambiguity set, cutting-plane generation and active-set upkeep.
//!
//! The set is
//!
//! ```text
//! P = { p : |p_j - q_j| <= pt_j,  sum_j |p_j - q_j| / pt_j <= gamma,  sum_j p_j = 1 }
//! ```
//!
//! Generating a plane means maximizing `sum_j (p_j - p_bar) f_j` over `P`.
//! Writing `p_j = q_j + pt_j u_j` turns this into
//!
//! ```text
//! max  sum_j pt_j f_j u_j   s.t.  sum_j pt_j u_j = 0,  sum_j |u_j| <= gamma,  |u_j| <= 1
//! ```
//!
//! With equal half-widths a two-pointer greedy over workers sorted by loss is
//! optimal. For unequal half-widths the equality constraint is dualized with a
//! scalar multiplier `mu`; the inner problem is then a fractional knapsack whose
//! value `V(mu)` is convex and piecewise linear, so its minimum sits on one of
//! the O(N^2) breakpoints. The primal point is recovered from the greedy
//! solutions just left and right of the minimizing breakpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack for the plane violation test.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("invalid uncertainty set: {0}")]
    InvalidSet(String),
    #[error("expected {expected} losses, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss for worker {0}")]
    NonFiniteLoss(usize),
    #[error("cutting-plane set is at capacity ({0})")]
    Capacity(usize),
    #[error("cutting-plane subproblem failed: {0}")]
    Solver(String),
}

/// Prior `q`, half-widths `p_tilde`, budget `gamma` and nominal weight `p_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdNormSet {
    q: Vec<f64>,
    p_tilde: Vec<f64>,
    gamma: f64,
    p_bar: f64,
}

impl CdNormSet {
    pub fn new(q: Vec<f64>, p_tilde: Vec<f64>, gamma: f64, p_bar: f64) -> Result<Self, UncertaintyError> {
        let invalid = |msg: String| Err(UncertaintyError::InvalidSet(msg));
        if q.is_empty() {
            return invalid("empty prior".into());
        }
        if p_tilde.len() != q.len() {
            return invalid(format!("{} half-widths for {} workers", p_tilde.len(), q.len()));
        }
        if q.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return invalid("prior entries must be finite and nonnegative".into());
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("prior sums to {total}"));
        }
        for (j, (&pt, &qj)) in p_tilde.iter().zip(&q).enumerate() {
            if pt <= 0.0 || !pt.is_finite() {
                return invalid(format!("half-width {j} must be positive"));
            }
            if pt > qj {
                return invalid(format!("half-width {j} ({pt}) exceeds prior weight ({qj})"));
            }
        }
        if gamma < 0.0 || !gamma.is_finite() {
            return invalid(format!("budget must be finite and nonnegative, got {gamma}"));
        }
        if !p_bar.is_finite() {
            return invalid("nominal weight must be finite".into());
        }
        Ok(Self { q, p_tilde, gamma, p_bar })
    }

    /// Uniform prior, maximal half-widths `pt_j = q_j`, `p_bar = 1/N`.
    pub fn uniform(n: usize, gamma: f64) -> Result<Self, UncertaintyError> {
        let q = vec![1.0 / n as f64; n];
        Self::new(q.clone(), q, gamma, 1.0 / n as f64)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn prior(&self) -> &[f64] {
        &self.q
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.p_tilde
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p_bar(&self) -> f64 {
        self.p_bar
    }

    fn uniform_widths(&self) -> bool {
        let first = self.p_tilde[0];
        self.p_tilde.iter().all(|&v| v == first)
    }

    /// Membership check with the tolerances used throughout the crate.
    pub fn contains(&self, p: &[f64]) -> bool {
        if p.len() != self.len() {
            return false;
        }
        let sum: f64 = p.iter().sum();
        let mut budget = 0.0;
        for ((pj, qj), wj) in p.iter().zip(&self.q).zip(&self.p_tilde) {
            let dev = pj - qj;
            if dev.abs() > wj + 1e-12 {
                return false;
            }
            budget += dev.abs() / wj;
        }
        (sum - 1.0).abs() <= 1e-12 && budget <= self.gamma + 1e-9
    }
}

/// `sum_j (p_j - p_bar) f_j`.
pub fn plane_objective(p: &[f64], losses: &[f64], p_bar: f64) -> f64 {
    p.iter().zip(losses).map(|(pj, fj)| (pj - p_bar) * fj).sum()
}

/// Worst-case distribution for the given worker losses.
///
/// Ties between equally good vertices are broken towards lower worker indices.
pub fn solve_cutting_plane_lp(losses: &[f64], set: &CdNormSet) -> Result<Vec<f64>, UncertaintyError> {
    if losses.len() != set.len() {
        return Err(UncertaintyError::DimensionMismatch { expected: set.len(), got: losses.len() });
    }
    if let Some(j) = losses.iter().position(|f| !f.is_finite()) {
        return Err(UncertaintyError::NonFiniteLoss(j));
    }
    if set.gamma == 0.0 || set.len() == 1 {
        return Ok(set.q.clone());
    }
    let p = if set.uniform_widths() {
        greedy_uniform(losses, set)
    } else {
        solve_parametric(losses, set)?
    };
    Ok(p)
}

/// Moves mass from the lowest-loss workers to the highest-loss ones. With a
/// common half-width `s` every unit of mass moved costs `2/s` of budget.
fn greedy_uniform(losses: &[f64], set: &CdNormSet) -> Vec<f64> {
    let n = losses.len();
    let s = set.p_tilde[0];
    let mut receivers: Vec<usize> = (0..n).collect();
    receivers.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut donors: Vec<usize> = (0..n).collect();
    donors.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));

    let mut p = set.q.clone();
    let mut cap_in = vec![s; n];
    let mut cap_out = vec![s; n];
    let mut mass_left = set.gamma * s / 2.0;
    let (mut ri, mut di) = (0, 0);
    while ri < n && di < n && mass_left > 0.0 {
        let (r, d) = (receivers[ri], donors[di]);
        if r == d || losses[r] <= losses[d] {
            break;
        }
        let m = cap_in[r].min(cap_out[d]).min(mass_left);
        p[r] += m;
        p[d] -= m;
        cap_in[r] -= m;
        cap_out[d] -= m;
        mass_left -= m;
        if cap_in[r] <= 0.0 {
            ri += 1;
        }
        if cap_out[d] <= 0.0 {
            di += 1;
        }
    }
    p
}

/// Value of the inner knapsack: the `gamma` largest `|e_j|`, fractionally.
fn knapsack_value(abs_e: &mut [f64], gamma: f64) -> f64 {
    abs_e.sort_by(|a, b| b.total_cmp(a));
    let mut left = gamma;
    let mut value = 0.0;
    for &a in abs_e.iter() {
        if left <= 0.0 {
            break;
        }
        let take = left.min(1.0);
        value += take * a;
        left -= take;
    }
    value
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Optimal inner solution at `mu - delta` (Left) or `mu + delta` (Right) for an
/// infinitesimal `delta`: order by `|e_j|`, then by how fast `|e_j|` grows in
/// that direction, then by index.
fn greedy_at(losses: &[f64], pt: &[f64], gamma: f64, mu: f64, side: Side) -> Vec<f64> {
    let n = losses.len();
    let e: Vec<f64> = (0..n).map(|j| pt[j] * (losses[j] - mu)).collect();
    let scale = e.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale;

    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| e[b].abs().total_cmp(&e[a].abs()).then(a.cmp(&b)));
    let mut group = vec![0usize; n];
    for w in 1..n {
        let (prev, cur) = (by_mag[w - 1], by_mag[w]);
        group[cur] = group[prev] + usize::from(e[prev].abs() - e[cur].abs() > tol);
    }

    let mut sign = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for j in 0..n {
        if e[j].abs() <= tol {
            sign[j] = match side {
                Side::Left => 1.0,
                Side::Right => -1.0,
            };
            slope[j] = pt[j];
        } else {
            sign[j] = e[j].signum();
            slope[j] = match side {
                Side::Left => sign[j] * pt[j],
                Side::Right => -sign[j] * pt[j],
            };
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        group[a].cmp(&group[b]).then(slope[b].total_cmp(&slope[a])).then(a.cmp(&b))
    });

    let mut u = vec![0.0; n];
    let mut left = gamma;
    for j in order {
        if left <= 0.0 {
            break;
        }
        let take = left.min(1.0);
        u[j] = sign[j] * take;
        left -= take;
    }
    u
}

fn solve_parametric(losses: &[f64], set: &CdNormSet) -> Result<Vec<f64>, UncertaintyError> {
    let n = losses.len();
    let pt = &set.p_tilde;
    let mut candidates: Vec<f64> = losses.to_vec();
    for i in 0..n {
        for j in i + 1..n {
            candidates.push((pt[i] * losses[i] + pt[j] * losses[j]) / (pt[i] + pt[j]));
            if pt[i] != pt[j] {
                candidates.push((pt[i] * losses[i] - pt[j] * losses[j]) / (pt[i] - pt[j]));
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut scratch = vec![0.0; n];
    let mut best = (f64::INFINITY, f64::NAN);
    for &mu in &candidates {
        for j in 0..n {
            scratch[j] = (pt[j] * (losses[j] - mu)).abs();
        }
        let v = knapsack_value(&mut scratch, set.gamma);
        if v < best.0 {
            best = (v, mu);
        }
    }
    let mu = best.1;

    let u_left = greedy_at(losses, pt, set.gamma, mu, Side::Left);
    let u_right = greedy_at(losses, pt, set.gamma, mu, Side::Right);
    let tilt = |u: &[f64]| -> f64 { u.iter().zip(pt).map(|(a, b)| a * b).sum() };
    let (s_left, s_right) = (tilt(&u_left), tilt(&u_right));
    // s_left >= 0 >= s_right at a minimizer; blend the two to zero the tilt.
    let theta = if s_left - s_right > 0.0 { (-s_right / (s_left - s_right)).clamp(0.0, 1.0) } else { 1.0 };
    let u: Vec<f64> = u_left
        .iter()
        .zip(&u_right)
        .map(|(l, r)| (theta * l + (1.0 - theta) * r).clamp(-1.0, 1.0))
        .collect();

    let residual = tilt(&u);
    if residual.abs() > 1e-9 {
        return Err(UncertaintyError::Solver(format!("unbalanced transfer {residual:e} at mu = {mu}")));
    }
    Ok((0..n).map(|j| set.q[j] + pt[j] * u[j]).collect())
}

/// One cutting plane `a` and its multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuttingPlane {
    /// Assigned by [`CuttingPlaneSet::add_plane`]; 0 until then.
    pub id: u64,
    pub a: Vec<f64>,
    pub dual: f64,
    pub prev_dual: f64,
    pub birth_iteration: usize,
}

impl CuttingPlane {
    /// `a^T f`.
    pub fn score(&self, losses: &[f64]) -> f64 {
        self.a.iter().zip(losses).map(|(a, f)| a * f).sum()
    }

    /// Weight the plane puts on worker `j`, `p_bar + a_j`.
    pub fn weight(&self, j: usize, p_bar: f64) -> f64 {
        p_bar + self.a[j]
    }
}

/// `a = p* - p_bar 1` with a zero multiplier.
pub fn make_plane(p_star: &[f64], set: &CdNormSet, birth_iteration: usize) -> Result<CuttingPlane, UncertaintyError> {
    if p_star.len() != set.len() {
        return Err(UncertaintyError::DimensionMismatch { expected: set.len(), got: p_star.len() });
    }
    Ok(CuttingPlane {
        id: 0,
        a: p_star.iter().map(|p| p - set.p_bar).collect(),
        dual: 0.0,
        prev_dual: 0.0,
        birth_iteration,
    })
}

/// Bounded, ordered list of planes with their multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuttingPlaneSet {
    planes: Vec<CuttingPlane>,
    max_planes: usize,
    next_id: u64,
}

impl CuttingPlaneSet {
    pub fn new(max_planes: usize) -> Self {
        Self { planes: Vec::new(), max_planes, next_id: 1 }
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn max_planes(&self) -> usize {
        self.max_planes
    }

    pub fn planes(&self) -> &[CuttingPlane] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [CuttingPlane] {
        &mut self.planes
    }

    pub fn ids(&self) -> Vec<u64> {
        self.planes.iter().map(|p| p.id).collect()
    }

    pub fn duals(&self) -> Vec<f64> {
        self.planes.iter().map(|p| p.dual).collect()
    }

    pub fn dual_sum(&self) -> f64 {
        self.planes.iter().map(|p| p.dual).sum()
    }

    /// `sum_l lambda_l (p_bar + a_{l,j})` for every worker.
    pub fn effective_weights(&self, n: usize, p_bar: f64) -> Vec<f64> {
        (0..n).map(|j| self.planes.iter().map(|p| p.dual * p.weight(j, p_bar)).sum()).collect()
    }

    /// Highest `a_l^T f` over the set; `-inf` when empty.
    pub fn max_score(&self, losses: &[f64]) -> f64 {
        self.planes.iter().map(|p| p.score(losses)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Appends `candidate` with zero multipliers and returns its id.
    pub fn add_plane(&mut self, mut candidate: CuttingPlane) -> Result<u64, UncertaintyError> {
        if self.planes.len() >= self.max_planes {
            return Err(UncertaintyError::Capacity(self.max_planes));
        }
        candidate.id = self.next_id;
        candidate.dual = 0.0;
        candidate.prev_dual = 0.0;
        self.next_id += 1;
        self.planes.push(candidate);
        Ok(self.next_id - 1)
    }

    /// Drops every plane whose multiplier was exactly zero in both of the last
    /// two iterations. Returns the removed planes in their original order.
    pub fn prune_inactive(&mut self) -> Vec<CuttingPlane> {
        let (kept, removed): (Vec<_>, Vec<_>) = std::mem::take(&mut self.planes)
            .into_iter()
            .partition(|p| !(p.dual == 0.0 && p.prev_dual == 0.0));
        self.planes = kept;
        removed
    }
}

/// True when the candidate's score beats every existing plane by more than
/// [`VIOLATION_TOL`].
pub fn violates(candidate: &CuttingPlane, losses: &[f64], planes: &CuttingPlaneSet) -> bool {
    candidate.score(losses) > planes.max_score(losses) + VIOLATION_TOL
}
