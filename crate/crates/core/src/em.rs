//! Pattern-coupled sparse Bayesian learning via expectation-maximization.
//!
//! Each iteration forms the Gaussian posterior for the current
//! hyperparameters (E-step), then replaces every hyperparameter with the
//! closed-form update `alpha_i = kappa / (0.5 * omega_i + b)`, where
//! `omega_i` sums the posterior second moments of coefficient `i` and its
//! two neighbours weighted by `beta`. When the noise variance is unknown,
//! the noise precision `gamma` is updated from the expected residual power
//! of the same posterior. Iteration stops once the MAP estimate moves by
//! less than `tol_epsilon` in l2 norm.
//!
//! With `beta = 0` the solver is conventional SBL.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::model::{
    compute_posterior_with, coupled_precision, neighbour_sum, HyperParams, Posterior,
    PosteriorMethod, PosteriorOptions, PriorConfig, Problem,
};
use crate::{Error, Result};

/// Slack allowed on shrinkage factors before they are reported as an
/// inconsistency between covariance and precision.
pub const RHO_TOLERANCE: f64 = 1e-8;

/// Initial noise precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitGamma {
    /// `gamma = 100 m / ||y||^2`, i.e. a noise variance of 1% of the mean
    /// measurement power.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub prior: PriorConfig,
    pub tol_epsilon: f64,
    pub max_iters: usize,
    pub learn_noise: bool,
    pub init_alpha: f64,
    pub init_gamma: InitGamma,
    pub method: PosteriorMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            prior: PriorConfig::default(),
            tol_epsilon: 1e-6,
            max_iters: 500,
            learn_noise: false,
            init_alpha: 1.0,
            init_gamma: InitGamma::Auto,
            method: PosteriorMethod::Auto,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if !(self.tol_epsilon.is_finite() && self.tol_epsilon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "tol_epsilon must be positive, got {}",
                self.tol_epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if !(self.init_alpha.is_finite() && self.init_alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "init_alpha must be positive, got {}",
                self.init_alpha
            )));
        }
        if let InitGamma::Fixed(g) = self.init_gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "init_gamma must be positive, got {g}"
                )));
            }
        }
        Ok(())
    }
}

/// One row of a solver trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// `||x^(t) - x^(t-1)||_2`, with `x^(-1) = 0`.
    pub delta_norm: f64,
    /// Noise variance `1/gamma` used by this iteration's E-step.
    pub noise_variance: Option<f64>,
    /// Q-function at the hyperparameters of this E-step (diagnostic).
    pub q_value: Option<f64>,
    /// Smallest and largest shrinkage factor of this E-step.
    pub rho_range: Option<(f64, f64)>,
    /// Non-zero coefficients (EM: unpruned; reweighting: support size).
    pub support: usize,
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub x_hat: DVector<f64>,
    pub alpha_final: Option<HyperParams>,
    pub gamma_final: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

/// Per-iteration quantities derived from the posterior.
#[derive(Clone, Debug)]
pub struct IterationScratch {
    pub omega: DVector<f64>,
    pub rho: DVector<f64>,
    pub chi: f64,
}

impl IterationScratch {
    pub fn compute(
        problem: &Problem,
        posterior: &Posterior,
        alpha: &HyperParams,
        beta: f64,
        gamma: f64,
    ) -> Result<Self> {
        let omega = omega(posterior, beta);
        let rho = rho(posterior, alpha, beta)?;
        let chi = chi(problem, posterior, &rho, gamma);
        Ok(Self { omega, rho, chi })
    }
}

/// Neighbour-weighted posterior second moments
/// `omega_i = s_i + beta s_{i+1} + beta s_{i-1}`, `s_i = mu_i^2 + phi_ii`.
pub fn omega(posterior: &Posterior, beta: f64) -> DVector<f64> {
    let second: Vec<f64> = posterior
        .mu
        .iter()
        .zip(posterior.phi_diag.iter())
        .map(|(m, p)| m * m + p)
        .collect();
    neighbour_sum(&second, beta)
}

/// Closed-form M-step: `alpha_i = kappa / (0.5 omega_i + b)`.
pub fn update_hyperparams(omega: &DVector<f64>, prior: &PriorConfig) -> Result<HyperParams> {
    if let Some(i) = omega.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "omega[{i}] must be finite and non-negative, got {}",
            omega[i]
        )));
    }
    HyperParams::new(omega.map(|w| prior.kappa / (0.5 * w + prior.b)))
}

/// Interval known to contain the exact M-step maximiser for coefficient `i`
/// of `n`: `[a, a + c0] / (0.5 omega_i + b)` with `c0 = 1` at the two ends
/// and `1.5` inside.
pub fn hyperparam_bracket(omega_i: f64, i: usize, n: usize, prior: &PriorConfig) -> (f64, f64) {
    let c0 = bracket_offset(i, n);
    let denom = 0.5 * omega_i + prior.b;
    (prior.a / denom, (prior.a + c0) / denom)
}

pub fn bracket_offset(i: usize, n: usize) -> f64 {
    if i == 0 || i + 1 == n {
        1.0
    } else {
        1.5
    }
}

/// Expected complete log-posterior of the hyperparameters, up to constants:
///
/// `sum_i a ln alpha_i - b alpha_i + ln(d_i)/2 - d_i (mu_i^2 + phi_ii)/2`.
pub fn q_function(alpha: &HyperParams, posterior: &Posterior, prior: &PriorConfig) -> Result<f64> {
    if let Some(i) = alpha.as_slice().iter().position(|&v| v <= 0.0) {
        return Err(Error::Domain(format!(
            "Q-function needs positive hyperparameters, alpha[{i}] = {}",
            alpha.as_slice()[i]
        )));
    }
    let d = coupled_precision(alpha.as_slice(), prior.beta)?;
    let q = alpha
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &a_i)| {
            let second = posterior.mu[i] * posterior.mu[i] + posterior.phi_diag[i];
            prior.a * a_i.ln() - prior.b * a_i + 0.5 * d[i].ln() - 0.5 * d[i] * second
        })
        .sum();
    Ok(q)
}

/// Shrinkage factors `rho_i = 1 - phi_ii d_i`.
///
/// Pruned coefficients sit at the prior-dominated limit and get `rho_i = 0`.
/// Values within [`RHO_TOLERANCE`] of `[0, 1]` are clamped; anything further
/// out means the posterior was not formed from these hyperparameters.
pub fn rho(posterior: &Posterior, alpha: &HyperParams, beta: f64) -> Result<DVector<f64>> {
    let n = posterior.n();
    if alpha.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} hyperparameters for a posterior of size {n}",
            alpha.len()
        )));
    }
    let d = coupled_precision(alpha.as_slice(), beta)?;
    let mut out = DVector::zeros(n);
    for i in 0..n {
        if !posterior.active[i] {
            continue;
        }
        let r = 1.0 - posterior.phi_diag[i] * d[i];
        if !(-RHO_TOLERANCE..=1.0 + RHO_TOLERANCE).contains(&r) {
            return Err(Error::Consistency(format!(
                "shrinkage factor rho[{i}] = {r} outside [0, 1]"
            )));
        }
        out[i] = r.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Expected residual power `||y - A mu||^2 + sum(rho) / gamma` under the
/// posterior formed with noise precision `gamma`.
pub fn chi(problem: &Problem, posterior: &Posterior, rho: &DVector<f64>, gamma: f64) -> f64 {
    let residual = problem.y() - problem.a() * &posterior.mu;
    residual.norm_squared() + rho.sum() / gamma
}

/// Noise-precision update `gamma = (m + 2c) / (chi + 2d)`.
pub fn noise_update(chi: f64, m: usize, prior: &PriorConfig) -> f64 {
    (m as f64 + 2.0 * prior.c) / (chi + 2.0 * prior.d)
}

/// State handed to an observer after every E-step.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub alpha: &'a HyperParams,
    pub gamma: f64,
    pub posterior: &'a Posterior,
    pub scratch: &'a IterationScratch,
}

/// Runs the EM solver to convergence or `max_iters`.
pub fn solve(problem: &Problem, config: &SolverConfig) -> Result<SolverResult> {
    solve_observed(problem, config, &mut |_| {})
}

pub fn solve_observed(
    problem: &Problem,
    config: &SolverConfig,
    observer: &mut dyn FnMut(&IterationView<'_>),
) -> Result<SolverResult> {
    config.validate()?;
    let prior = &config.prior;
    let beta = prior.beta;
    let n = problem.n();
    let m = problem.m();

    let mut gamma = if config.learn_noise {
        match config.init_gamma {
            InitGamma::Fixed(g) => g,
            InitGamma::Auto => {
                let power = problem.y().norm_squared();
                if power > 0.0 {
                    100.0 * m as f64 / power
                } else {
                    1.0
                }
            }
        }
    } else {
        let variance = problem.effective_noise_variance().ok_or_else(|| {
            Error::InvalidInput("noise variance required unless learn_noise is set".into())
        })?;
        1.0 / variance
    };

    let options = PosteriorOptions {
        method: config.method,
        full_covariance: false,
    };
    let mut alpha = HyperParams::uniform(n, config.init_alpha)?;
    let mut x_prev = DVector::zeros(n);
    let mut trace = Vec::new();
    let mut converged = false;

    let x_hat = loop {
        let posterior = compute_posterior_with(problem, &alpha, beta, 1.0 / gamma, options)?;
        let scratch = IterationScratch::compute(problem, &posterior, &alpha, beta, gamma)?;
        observer(&IterationView {
            iteration: trace.len(),
            alpha: &alpha,
            gamma,
            posterior: &posterior,
            scratch: &scratch,
        });

        let x = posterior.mu.clone();
        let delta_norm = (&x - &x_prev).norm();
        let rho_range = scratch
            .rho
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            });
        trace.push(IterationRecord {
            delta_norm,
            noise_variance: Some(1.0 / gamma),
            q_value: q_function(&alpha, &posterior, prior).ok(),
            rho_range: Some(rho_range),
            support: posterior.active_count(),
        });

        if trace.len() > 1 && delta_norm <= config.tol_epsilon {
            converged = true;
            break x;
        }
        if trace.len() >= config.max_iters {
            break x;
        }

        let updated = update_hyperparams(&scratch.omega, prior)?;
        // Pruning is irreversible: pruned entries keep their value.
        let merged = DVector::from_fn(n, |i, _| {
            if alpha.is_pruned(i) {
                alpha.as_slice()[i]
            } else {
                updated.as_slice()[i]
            }
        });
        alpha = HyperParams::new(merged)?;
        if config.learn_noise {
            gamma = noise_update(scratch.chi, m, prior);
        }
        x_prev = x;
    };

    Ok(SolverResult {
        x_hat,
        iterations: trace.len(),
        alpha_final: Some(alpha),
        gamma_final: Some(gamma),
        converged,
        trace,
    })
}
