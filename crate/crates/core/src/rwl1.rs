//! Iteratively reweighted l1 minimisation with neighbour-coupled weights.
//!
//! Each outer round solves
//!
//! ```text
//! min  sum_i w_i |x_i|   s.t.  Ax = y          (exact measurements)
//!                        or    ||Ax - y|| <= delta   (noise budget)
//! ```
//!
//! and then sets `w_i = 1 / (|x_i| + beta |x_{i+1}| + beta |x_{i-1}| + eps)`.
//! The first round uses unit weights (plain l1); `beta = 0` is conventional
//! reweighted l1.
//!
//! The weighted-l1 problem is solved by ADMM on the splitting `x = z`, with
//! `x` projected onto the constraint set and `z` soft-thresholded. Both the
//! affine projection and the ridge solve of the noisy mode come from a
//! single thin SVD of `A`, so the penalty can be rebalanced freely.
//!
//! ADMM is slow to settle on degenerate vertices, which are the norm for
//! these LPs. In the exact mode the iterate is therefore periodically fitted
//! on its support and checked against a dual certificate, with an exact
//! simplex crossover as the last resort.

use nalgebra::{DMatrix, DVector, Dyn, SVD};
use serde::{Deserialize, Serialize};

use crate::em::{IterationRecord, SolverResult};
use crate::model::Problem;
use crate::{Error, Result};

mod simplex;

/// Entries below this fraction of the largest magnitude are not counted as
/// support.
const SUPPORT_REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerSolverConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Initial ADMM penalty; `None` scales it from `||A||_2` and the weights.
    pub penalty: Option<f64>,
    /// Exact mode only. Re-solve on the detected support, stop early once a
    /// duality-gap check certifies that fit, and fall back to a simplex
    /// crossover if ADMM exhausts `max_iters`.
    pub polish: bool,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-6,
            max_iters: 5000,
            penalty: None,
            polish: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwConfig {
    pub beta: f64,
    /// `eps` of the first reweighted round.
    pub weight_eps: f64,
    /// Factor applied to `eps` after every reweighted round.
    pub eps_decay: f64,
    pub eps_floor: f64,
    pub outer_iters: usize,
    pub inner: InnerSolverConfig,
    /// Residual bound `delta`; `None` enforces `Ax = y`.
    pub noise_budget: Option<f64>,
}

impl Default for RwConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            weight_eps: 1e-3,
            eps_decay: 0.5,
            eps_floor: 1e-6,
            outer_iters: 8,
            inner: InnerSolverConfig::default(),
            noise_budget: None,
        }
    }
}

impl RwConfig {
    /// Plain l1: a single unit-weight round.
    pub fn plain_l1() -> Self {
        Self {
            outer_iters: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidInput(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.weight_eps.is_finite() && self.weight_eps > 0.0) {
            return Err(Error::InvalidInput(format!(
                "weight_eps must be positive, got {}",
                self.weight_eps
            )));
        }
        if !(self.eps_floor > 0.0 && self.eps_decay > 0.0 && self.eps_decay <= 1.0) {
            return Err(Error::InvalidInput(
                "eps_floor must be positive and eps_decay in (0, 1]".into(),
            ));
        }
        if self.outer_iters == 0 || self.inner.max_iters == 0 {
            return Err(Error::InvalidInput("iteration counts must be positive".into()));
        }
        if !(self.inner.abs_tol > 0.0 && self.inner.rel_tol >= 0.0) {
            return Err(Error::InvalidInput("inner tolerances must be positive".into()));
        }
        if let Some(p) = self.inner.penalty {
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::InvalidInput(format!("penalty must be positive, got {p}")));
            }
        }
        if let Some(delta) = self.noise_budget {
            if !(delta.is_finite() && delta >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "noise budget must be non-negative, got {delta}"
                )));
            }
        }
        Ok(())
    }

    /// Weight `eps` for reweighted round `round` (1-based; round 0 is plain l1).
    pub fn eps_for_round(&self, round: usize) -> f64 {
        let steps = round.saturating_sub(1) as i32;
        (self.weight_eps * self.eps_decay.powi(steps)).max(self.eps_floor.min(self.weight_eps))
    }
}

/// Weights and the iterate they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightState {
    pub w: DVector<f64>,
    pub x_prev: DVector<f64>,
    pub outer_iter: usize,
}

/// `w_i = 1 / (|x_i| + beta (|x_{i-1}| + |x_{i+1}|) + eps)` using
/// `config.weight_eps`.
pub fn update_weights(x_prev: &DVector<f64>, config: &RwConfig) -> DVector<f64> {
    coupled_weights(x_prev, config.beta, config.weight_eps)
}

pub fn coupled_weights(x_prev: &DVector<f64>, beta: f64, eps: f64) -> DVector<f64> {
    let mags: Vec<f64> = x_prev.iter().map(|v| v.abs()).collect();
    crate::model::neighbour_sum(&mags, beta).map(|s| 1.0 / (s + eps))
}

/// Diagnostics of one weighted-l1 solve.
#[derive(Clone, Debug)]
pub struct InnerReport {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Weighted l1 objective of the returned point.
    pub objective: f64,
    /// Objective of the minimum-norm feasible starting point (exact mode)
    /// or of the ridge solution (noisy mode).
    pub initial_objective: f64,
    /// Objective of the `x` iterate after every ADMM step.
    pub objective_trace: Vec<f64>,
    pub polished: bool,
    /// `||Ax - y||_2` of the returned point.
    pub residual: f64,
}

/// Solves the weighted-l1 problem and returns the minimiser.
pub fn weighted_l1_solve(problem: &Problem, w: &DVector<f64>, config: &RwConfig) -> Result<DVector<f64>> {
    weighted_l1_solve_report(problem, w, config).map(|r| r.x)
}

/// Thin SVD pieces restricted to the numerical rank.
struct Factors {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

impl Factors {
    fn new(a: &DMatrix<f64>) -> Result<Self> {
        let svd = a.clone().svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::InvalidInput("SVD of A failed".into())),
        };
        let s_max = svd.singular_values.max();
        let cutoff = s_max * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > cutoff)
            .collect();
        Ok(Self {
            u: u.select_columns(&keep),
            s: DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i])),
            v: v_t.select_rows(&keep).transpose(),
        })
    }

    fn norm(&self) -> f64 {
        if self.s.is_empty() {
            0.0
        } else {
            self.s.max()
        }
    }

    /// Minimum-norm least-squares solution `A^+ y`.
    fn pseudo_solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.u.tr_mul(y).component_div(&self.s);
        &self.v * coeffs
    }

    /// `v - V V^T v`: projection onto the null space of `A`.
    fn null_project(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.v * self.v.tr_mul(v)
    }

    /// `(I + A^T A)^{-1} q`.
    fn ridge_solve(&self, q: &DVector<f64>) -> DVector<f64> {
        let shrink = self.s.map(|s| s * s / (1.0 + s * s));
        q - &self.v * self.v.tr_mul(q).component_mul(&shrink)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn weighted_l1(w: &DVector<f64>, x: &DVector<f64>) -> f64 {
    w.iter().zip(x.iter()).map(|(w, x)| w * x.abs()).sum()
}

fn median(values: &DVector<f64>) -> f64 {
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len() / 2]
}

pub fn weighted_l1_solve_report(
    problem: &Problem,
    w: &DVector<f64>,
    config: &RwConfig,
) -> Result<InnerReport> {
    config.validate()?;
    let n = problem.n();
    if w.len() != n {
        return Err(Error::InvalidInput(format!("{} weights for {n} coefficients", w.len())));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidInput("weights must be positive and finite".into()));
    }
    let factors = Factors::new(problem.a())?;
    match config.noise_budget {
        None => solve_equality(problem, w, config, &factors),
        Some(delta) => solve_ball(problem, w, config, &factors, delta),
    }
}

/// Residual balancing: keep primal and dual residuals within a factor of
/// `MU` of each other.
const BALANCE_MU: f64 = 10.0;
const BALANCE_TAU: f64 = 2.0;
const BALANCE_EVERY: usize = 10;
const BALANCE_UNTIL: usize = 1000;
const CERTIFY_EVERY: usize = 20;

fn initial_penalty(config: &RwConfig, factors: &Factors, w: &DVector<f64>, x0: &DVector<f64>) -> f64 {
    if let Some(p) = config.inner.penalty {
        return p;
    }
    let scale = x0.amax();
    let rho = factors.norm() * median(w) / if scale > 0.0 { scale } else { 1.0 };
    if rho.is_finite() && rho > 0.0 {
        rho
    } else {
        1.0
    }
}

fn solve_equality(
    problem: &Problem,
    w: &DVector<f64>,
    config: &RwConfig,
    factors: &Factors,
) -> Result<InnerReport> {
    let a = problem.a();
    let y = problem.y();
    let n = problem.n();
    let inner = &config.inner;

    let x0 = factors.pseudo_solve(y);
    let feasibility = (a * &x0 - y).norm();
    if feasibility > 1e-8 * y.norm().max(1.0) {
        return Err(Error::Infeasible {
            residual: feasibility,
        });
    }
    let project = |v: &DVector<f64>| &x0 + factors.null_project(v);

    let mut rho = initial_penalty(config, factors, w, &x0);
    let mut x = x0.clone();
    let mut z = x0.clone();
    let mut u = DVector::zeros(n);
    let sqrt_n = (n as f64).sqrt();
    let mut objective_trace = Vec::new();

    for iter in 1..=inner.max_iters {
        x = project(&(&z - &u));
        let z_prev = z.clone();
        let v = &x + &u;
        z = DVector::from_fn(n, |i, _| soft_threshold(v[i], w[i] / rho));
        u += &x - &z;
        objective_trace.push(weighted_l1(w, &x));

        let r_norm = (&x - &z).norm();
        let s_norm = rho * (&z - &z_prev).norm();
        let eps_pri = sqrt_n * inner.abs_tol + inner.rel_tol * x.norm().max(z.norm());
        let eps_dual = sqrt_n * inner.abs_tol + inner.rel_tol * rho * u.norm();
        if r_norm <= eps_pri && s_norm <= eps_dual {
            let mut report = InnerReport {
                objective: weighted_l1(w, &x),
                initial_objective: weighted_l1(w, &x0),
                residual: (a * &x - y).norm(),
                x,
                iterations: iter,
                objective_trace,
                polished: false,
            };
            if inner.polish {
                polish(problem, w, &z, &mut report);
            }
            return Ok(report);
        }

        if inner.polish && iter % CERTIFY_EVERY == 0 {
            if let Some((x, objective, residual)) =
                certify(problem, factors, w, &z, &(&u * rho), inner.abs_tol)
            {
                return Ok(InnerReport {
                    x,
                    iterations: iter,
                    objective,
                    initial_objective: weighted_l1(w, &x0),
                    objective_trace,
                    polished: true,
                    residual,
                });
            }
        }

        if iter % BALANCE_EVERY == 0 && iter <= BALANCE_UNTIL {
            if r_norm > BALANCE_MU * s_norm {
                rho *= BALANCE_TAU;
                u /= BALANCE_TAU;
            } else if s_norm > BALANCE_MU * r_norm {
                rho /= BALANCE_TAU;
                u *= BALANCE_TAU;
            }
        }
    }
    if inner.polish {
        if let Some(report) = crossover(problem, w, &x0, inner.max_iters, objective_trace) {
            return Ok(report);
        }
    }
    Err(Error::NonConvergence {
        iterations: inner.max_iters,
        last: x,
    })
}

/// Exact vertex from the simplex, refitted on its support.
fn crossover(
    problem: &Problem,
    w: &DVector<f64>,
    x0: &DVector<f64>,
    iterations: usize,
    objective_trace: Vec<f64>,
) -> Option<InnerReport> {
    let y = problem.y();
    let vertex = simplex::solve(problem.a(), y, w)?;
    let x = fit_support(problem, &vertex).map_or(vertex, |fit| fit.x);
    let residual = (problem.a() * &x - y).norm();
    if residual > 1e-8 * y.norm().max(1.0) {
        return None;
    }
    Some(InnerReport {
        objective: weighted_l1(w, &x),
        initial_objective: weighted_l1(w, x0),
        x,
        iterations,
        objective_trace,
        polished: true,
        residual,
    })
}

/// Least-squares fit of `y` on the columns where `z` is nonzero. `None` when
/// the support is empty, wider than `m` or numerically rank deficient.
struct SupportFit {
    support: Vec<usize>,
    svd: SVD<f64, Dyn, Dyn>,
    x: DVector<f64>,
}

fn fit_support(problem: &Problem, z: &DVector<f64>) -> Option<SupportFit> {
    let support: Vec<usize> = (0..z.len()).filter(|&i| z[i] != 0.0).collect();
    fit_columns(problem, support)
}

fn fit_columns(problem: &Problem, support: Vec<usize>) -> Option<SupportFit> {
    if support.is_empty() || support.len() > problem.m() {
        return None;
    }
    let svd = problem.a().select_columns(&support).svd(true, true);
    let s_min = svd.singular_values.min();
    let s_max = svd.singular_values.max();
    if !(s_min > 1e-10 * s_max) {
        return None;
    }
    let x_s = svd.solve(problem.y(), 0.0).ok()?;
    let mut x = DVector::zeros(problem.n());
    for (k, &i) in support.iter().enumerate() {
        x[i] = x_s[k];
    }
    Some(SupportFit { support, svd, x })
}

/// Replaces the ADMM point by the exact solution of `A_S x_S = y` on the
/// support `S` of the thresholded iterate, when that is well posed, feasible
/// and no worse in objective.
fn polish(problem: &Problem, w: &DVector<f64>, z: &DVector<f64>, report: &mut InnerReport) {
    let y = problem.y();
    let Some(fit) = fit_support(problem, z) else {
        return;
    };
    let residual = (problem.a() * &fit.x - y).norm();
    let objective = weighted_l1(w, &fit.x);
    let feasible = residual <= report.residual.max(1e-10 * y.norm().max(1.0));
    if feasible && objective <= report.objective * (1.0 + 1e-9) {
        report.x = fit.x;
        report.objective = objective;
        report.residual = residual;
        report.polished = true;
    }
}

/// Early exit for the equality mode. Fits `y` on the support of `z`, then
/// builds a dual point from the ADMM multiplier `g ~ A^T lambda`, corrected to
/// be exact on the support and scaled into the dual feasible set. Returns the
/// fit, its objective and residual when the duality gap is within `tol`.
fn certify(
    problem: &Problem,
    factors: &Factors,
    w: &DVector<f64>,
    z: &DVector<f64>,
    g: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, f64, f64)> {
    let a = problem.a();
    let y = problem.y();
    let limit = tol * y.norm().max(1.0);
    let mut fit = fit_support(problem, z)?;
    let mut residual = (a * &fit.x - y).norm();
    if residual > limit {
        // A vertex may carry coefficients too small to survive thresholding.
        // Complementary slackness puts them where the dual is nearly active,
        // so complete the support to a basis in that order.
        let mut ranked: Vec<usize> = (0..z.len()).filter(|&i| z[i] == 0.0).collect();
        ranked.sort_by(|&i, &j| (g[j].abs() / w[j]).total_cmp(&(g[i].abs() / w[i])));
        let room = problem.m() - fit.support.len();
        let mut support = fit.support.clone();
        support.extend(ranked.into_iter().take(room));
        support.sort_unstable();
        fit = fit_columns(problem, support)?;
        residual = (a * &fit.x - y).norm();
        if residual > limit {
            return None;
        }
    }
    let objective = weighted_l1(w, &fit.x);

    let mut lambda = &factors.u * factors.v.tr_mul(g).component_div(&factors.s);
    let target = DVector::from_iterator(
        fit.support.len(),
        fit.support.iter().map(|&i| w[i] * fit.x[i].signum()),
    );
    let on_support = a.select_columns(&fit.support).tr_mul(&lambda);
    let u_s = fit.svd.u.as_ref()?;
    let v_t = fit.svd.v_t.as_ref()?;
    lambda += u_s * (v_t * (target - on_support)).component_div(&fit.svd.singular_values);

    let h = a.tr_mul(&lambda);
    let worst = (0..h.len()).map(|i| h[i].abs() / w[i]).fold(0.0, f64::max);
    let dual = y.dot(&lambda) / worst.max(1.0);
    if objective - dual <= tol * objective.max(1.0) {
        Some((fit.x, objective, residual))
    } else {
        None
    }
}

fn project_ball(v: &DVector<f64>, center: &DVector<f64>, radius: f64) -> DVector<f64> {
    let offset = v - center;
    let dist = offset.norm();
    if dist <= radius {
        v.clone()
    } else {
        center + offset * (radius / dist)
    }
}

fn solve_ball(
    problem: &Problem,
    w: &DVector<f64>,
    config: &RwConfig,
    factors: &Factors,
    delta: f64,
) -> Result<InnerReport> {
    let a = problem.a();
    let y = problem.y();
    let n = problem.n();
    let m = problem.m();
    let inner = &config.inner;

    // Distance from y to the range of A is the smallest achievable residual.
    let range_part = &factors.u * factors.u.tr_mul(y);
    let floor = (y - range_part).norm();
    if floor > delta * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Infeasible { residual: floor });
    }

    let x0 = factors.ridge_solve(&a.tr_mul(y));
    let mut rho = initial_penalty(config, factors, w, &x0);
    let mut x = x0.clone();
    let mut z = x0.clone();
    let mut v = project_ball(&(a * &x0), y, delta);
    let mut u_z = DVector::zeros(n);
    let mut u_v = DVector::zeros(m);
    let scale = (n as f64 + m as f64).sqrt();
    let mut objective_trace = Vec::new();

    for iter in 1..=inner.max_iters {
        let q = (&z - &u_z) + a.tr_mul(&(&v - &u_v));
        x = factors.ridge_solve(&q);
        let ax = a * &x;
        let z_prev = z.clone();
        let v_prev = v.clone();
        let shifted = &x + &u_z;
        z = DVector::from_fn(n, |i, _| soft_threshold(shifted[i], w[i] / rho));
        v = project_ball(&(&ax + &u_v), y, delta);
        u_z += &x - &z;
        u_v += &ax - &v;
        objective_trace.push(weighted_l1(w, &x));

        let r_norm = ((&x - &z).norm_squared() + (&ax - &v).norm_squared()).sqrt();
        let s_norm = rho * ((&z - &z_prev) + a.tr_mul(&(&v - &v_prev))).norm();
        let primal_scale = (x.norm_squared() + ax.norm_squared())
            .sqrt()
            .max((z.norm_squared() + v.norm_squared()).sqrt());
        let dual_scale = rho * (&u_z + a.tr_mul(&u_v)).norm();
        let eps_pri = scale * inner.abs_tol + inner.rel_tol * primal_scale;
        let eps_dual = (n as f64).sqrt() * inner.abs_tol + inner.rel_tol * dual_scale;
        if r_norm <= eps_pri && s_norm <= eps_dual {
            return Ok(InnerReport {
                objective: weighted_l1(w, &x),
                initial_objective: weighted_l1(w, &x0),
                residual: (&ax - y).norm(),
                x,
                iterations: iter,
                objective_trace,
                polished: false,
            });
        }

        if iter % BALANCE_EVERY == 0 && iter <= BALANCE_UNTIL {
            if r_norm > BALANCE_MU * s_norm {
                rho *= BALANCE_TAU;
                u_z /= BALANCE_TAU;
                u_v /= BALANCE_TAU;
            } else if s_norm > BALANCE_MU * r_norm {
                rho /= BALANCE_TAU;
                u_z *= BALANCE_TAU;
                u_v *= BALANCE_TAU;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: inner.max_iters,
        last: x,
    })
}

fn support_size(x: &DVector<f64>) -> usize {
    let cutoff = SUPPORT_REL_TOL * x.amax();
    x.iter().filter(|v| v.abs() > cutoff).count()
}

/// Reweighted l1 with coupled weights, starting from unit weights.
pub fn solve_mrl1(problem: &Problem, config: &RwConfig) -> Result<SolverResult> {
    solve_mrl1_observed(problem, config, &mut |_| {})
}

/// As [`solve_mrl1`], handing the weights of every round to `observer`
/// before the round's weighted-l1 solve.
pub fn solve_mrl1_observed(
    problem: &Problem,
    config: &RwConfig,
    observer: &mut dyn FnMut(&WeightState),
) -> Result<SolverResult> {
    config.validate()?;
    let n = problem.n();
    let mut state = WeightState {
        w: DVector::from_element(n, 1.0),
        x_prev: DVector::zeros(n),
        outer_iter: 0,
    };
    let mut trace = Vec::with_capacity(config.outer_iters);
    for round in 0..config.outer_iters {
        if round > 0 {
            state.w = coupled_weights(&state.x_prev, config.beta, config.eps_for_round(round));
        }
        state.outer_iter = round;
        observer(&state);
        let x = weighted_l1_solve(problem, &state.w, config)?;
        trace.push(IterationRecord {
            delta_norm: (&x - &state.x_prev).norm(),
            noise_variance: None,
            q_value: None,
            rho_range: None,
            support: support_size(&x),
        });
        state.x_prev = x;
    }
    Ok(SolverResult {
        x_hat: state.x_prev,
        alpha_final: None,
        gamma_final: None,
        iterations: config.outer_iters,
        converged: true,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn weight_examples() {
        let cfg = RwConfig {
            weight_eps: 0.1,
            ..RwConfig::default()
        };
        let w = update_weights(&DVector::zeros(4), &cfg);
        assert!(w.iter().all(|&v| (v - 10.0).abs() < 1e-12));

        let w = update_weights(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &cfg);
        assert!((w[0] - 1.0 / 1.1).abs() < 1e-15);
        assert!((w[1] - 1.0 / 1.1).abs() < 1e-15);
        assert!((w[2] - 10.0).abs() < 1e-12);

        let cfg = RwConfig {
            beta: 0.0,
            weight_eps: 1.0,
            ..RwConfig::default()
        };
        let w = update_weights(&DVector::from_vec(vec![2.0, 0.0]), &cfg);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(w[1], 1.0);
    }

    #[test]
    fn eps_schedule_decays_to_floor() {
        let cfg = RwConfig::default();
        assert_eq!(cfg.eps_for_round(1), 1e-3);
        assert_eq!(cfg.eps_for_round(2), 5e-4);
        assert_eq!(cfg.eps_for_round(40), 1e-6);
    }

    #[test]
    fn identity_returns_observation() {
        let y = DVector::from_vec(vec![0.5, -1.0, 0.0, 2.0]);
        let p = Problem::new(DMatrix::identity(4, 4), y.clone()).unwrap();
        let w = DVector::from_vec(vec![1.0, 5.0, 0.1, 2.0]);
        let x = weighted_l1_solve(&p, &w, &RwConfig::default()).unwrap();
        assert!((x - y).amax() < 1e-9);
    }

    #[test]
    fn tiny_lp_picks_cheap_vertex() {
        let p = Problem::new(dmatrix![1.0, 1.0], DVector::from_vec(vec![1.0])).unwrap();
        let w = DVector::from_vec(vec![1.0, 3.0]);
        let x = weighted_l1_solve(&p, &w, &RwConfig::default()).unwrap();
        assert!((x - DVector::from_vec(vec![1.0, 0.0])).amax() < 1e-8);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let a = dmatrix![1.0, 1.0; 2.0, 2.0];
        let p = Problem::new(a, DVector::from_vec(vec![1.0, 3.0])).unwrap();
        let err = weighted_l1_solve(&p, &DVector::from_element(2, 1.0), &RwConfig::default());
        assert!(matches!(err, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn rank_deficient_but_consistent_is_solved() {
        let a = dmatrix![1.0, 1.0, 0.0; 2.0, 2.0, 0.0];
        let p = Problem::new(a, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let w = DVector::from_vec(vec![2.0, 1.0, 1.0]);
        let x = weighted_l1_solve(&p, &w, &RwConfig::default()).unwrap();
        assert!((x - DVector::from_vec(vec![0.0, 1.0, 0.0])).amax() < 1e-8);
    }

    #[test]
    fn too_small_budget_is_infeasible() {
        let a = dmatrix![1.0, 0.0; 1.0, 0.0];
        let p = Problem::new(a, DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let cfg = RwConfig {
            noise_budget: Some(0.5),
            ..RwConfig::default()
        };
        let err = weighted_l1_solve(&p, &DVector::from_element(2, 1.0), &cfg);
        assert!(matches!(err, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn non_convergence_carries_last_iterate() {
        let a = gaussian(5, 12, 3);
        let y = a.column(1) - a.column(7);
        let p = Problem::new(a, y).unwrap();
        let cfg = RwConfig {
            inner: InnerSolverConfig {
                max_iters: 2,
                polish: false,
                ..InnerSolverConfig::default()
            },
            ..RwConfig::default()
        };
        match weighted_l1_solve(&p, &DVector::from_element(12, 1.0), &cfg) {
            Err(Error::NonConvergence { iterations, last }) => {
                assert_eq!(iterations, 2);
                assert_eq!(last.len(), 12);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn noisy_mode_respects_budget_and_shrinks() {
        let a = gaussian(20, 40, 5);
        let mut x = DVector::zeros(40);
        x[10] = 1.0;
        x[11] = -0.8;
        x[12] = 0.6;
        let noise = DVector::from_fn(20, |i, _| 0.01 * ((i * 7) as f64).sin());
        let y = &a * &x + &noise;
        let delta = noise.norm();
        let p = Problem::new(a.clone(), y.clone()).unwrap();
        let cfg = RwConfig {
            noise_budget: Some(delta),
            ..RwConfig::default()
        };
        let report = weighted_l1_solve_report(&p, &DVector::from_element(40, 1.0), &cfg).unwrap();
        assert!(report.residual <= delta * (1.0 + 1e-4));
        // The planted signal is feasible, so the optimum is no larger.
        assert!(report.objective <= x.lp_norm(1) * (1.0 + 1e-4));
        assert!(report.objective <= report.initial_objective);
    }

    #[test]
    fn basis_pursuit_recovers_planted_signal() {
        let a = gaussian(10, 30, 17);
        let mut x = DVector::zeros(30);
        x[4] = 1.2;
        x[17] = -0.7;
        x[25] = 0.9;
        let y = &a * &x;
        let p = Problem::new(a, y).unwrap();
        let x_hat = weighted_l1_solve(&p, &DVector::from_element(30, 1.0), &RwConfig::default()).unwrap();
        assert!((x_hat - x).norm() < 1e-5);
    }

    #[test]
    fn objective_ends_below_feasible_start() {
        let a = gaussian(8, 20, 23);
        let y = DVector::from_fn(8, |i, _| (i as f64 * 0.37).cos());
        let p = Problem::new(a, y).unwrap();
        let w = DVector::from_fn(20, |i, _| 0.5 + (i % 3) as f64);
        let report = weighted_l1_solve_report(&p, &w, &RwConfig::default()).unwrap();
        assert!(report.objective <= report.initial_objective);
        assert!(*report.objective_trace.last().unwrap() <= report.initial_objective);
        assert!(report.residual < 1e-8);
    }

    #[test]
    fn single_round_is_plain_l1() {
        let a = gaussian(12, 30, 31);
        let mut x = DVector::zeros(30);
        for i in 8..13 {
            x[i] = 1.0;
        }
        let y = &a * &x;
        let p = Problem::new(a, y).unwrap();
        let cfg = RwConfig::plain_l1();
        let mrl1 = solve_mrl1(&p, &cfg).unwrap();
        let plain = weighted_l1_solve(&p, &DVector::from_element(30, 1.0), &cfg).unwrap();
        assert_eq!(mrl1.x_hat, plain);
        assert_eq!(mrl1.trace.len(), 1);
    }

    #[test]
    fn zero_beta_matches_conventional_reweighting() {
        let a = gaussian(14, 30, 37);
        let mut x = DVector::zeros(30);
        for i in 3..9 {
            x[i] = (i as f64).cos();
        }
        let y = &a * &x;
        let p = Problem::new(a, y).unwrap();
        let cfg = RwConfig {
            beta: 0.0,
            outer_iters: 4,
            ..RwConfig::default()
        };
        let result = solve_mrl1(&p, &cfg).unwrap();

        // Conventional rule: w_i = 1 / (|x_i| + eps).
        let mut x_prev = DVector::zeros(30);
        for round in 0..4 {
            let w = if round == 0 {
                DVector::from_element(30, 1.0)
            } else {
                let eps = cfg.eps_for_round(round);
                x_prev.map(|v: f64| 1.0 / (v.abs() + eps))
            };
            x_prev = weighted_l1_solve(&p, &w, &cfg).unwrap();
        }
        assert!((result.x_hat - x_prev).amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn weights_positive_and_bounded(
            x in proptest::collection::vec(-5.0f64..5.0, 1..30),
            beta in 0.0f64..=1.0,
            eps in 1e-6f64..1.0,
        ) {
            let x = DVector::from_vec(x);
            let w = coupled_weights(&x, beta, eps);
            for &v in w.iter() {
                prop_assert!(v > 0.0 && v.is_finite() && v <= 1.0 / eps);
            }
        }

        #[test]
        fn weights_reversal_equivariant(
            x in proptest::collection::vec(-5.0f64..5.0, 1..30),
            beta in 0.0f64..=1.0,
        ) {
            let n = x.len();
            let fwd = coupled_weights(&DVector::from_vec(x.clone()), beta, 1e-3);
            let mut rev_x = x;
            rev_x.reverse();
            let rev = coupled_weights(&DVector::from_vec(rev_x), beta, 1e-3);
            for i in 0..n {
                prop_assert_eq!(fwd[i], rev[n - 1 - i]);
            }
        }
    }
}
