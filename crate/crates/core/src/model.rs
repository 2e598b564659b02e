//! Measurement model, coupled Gaussian prior and posterior moments.
//!
//! Every coefficient `x_i` carries the prior `N(0, 1/d_i)` with the coupled
//! precision `d_i = alpha_i + beta * alpha_{i+1} + beta * alpha_{i-1}`, where
//! the virtual neighbours `alpha_0` and `alpha_{n+1}` are zero. Given the
//! Gaussian likelihood `y ~ N(Ax, sigma^2 I)` the posterior over `x` is
//! Gaussian with
//!
//! ```text
//! Phi = (A^T A / sigma^2 + D)^{-1},    mu = Phi A^T y / sigma^2.
//! ```
//!
//! The posterior is formed either directly, by factoring the `n x n`
//! precision, or through the Woodbury form
//! `Phi = D^{-1} - D^{-1} A^T (sigma^2 I + A D^{-1} A^T)^{-1} A D^{-1}`,
//! which only factors an `m x m` matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperparameters above this value remove their coefficient from the
/// active system; the coefficient is reported as exactly zero.
pub const PRUNE_THRESHOLD: f64 = 1e10;

/// Noise variance substituted when measurements are declared exact.
pub const NOISE_FREE_VARIANCE: f64 = 1e-10;

/// Relative size of the ridge added once when a factorization fails.
const RIDGE_SCALE: f64 = 1e-12;

/// A linear measurement problem `y = Ax + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    a: DMatrix<f64>,
    y: DVector<f64>,
    noise_variance: Option<f64>,
    truth: Option<DVector<f64>>,
}

impl Problem {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "measurement matrix must be non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if y.len() != a.nrows() {
            return Err(Error::InvalidInput(format!(
                "observation length {} does not match {} rows",
                y.len(),
                a.nrows()
            )));
        }
        if a.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in A or y".into()));
        }
        Ok(Self {
            a,
            y,
            noise_variance: None,
            truth: None,
        })
    }

    /// Declares the noise variance. Zero means exact measurements.
    pub fn with_noise_variance(mut self, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise variance must be finite and non-negative, got {variance}"
            )));
        }
        self.noise_variance = Some(variance);
        Ok(self)
    }

    pub fn with_truth(mut self, truth: DVector<f64>) -> Result<Self> {
        if truth.len() != self.n() {
            return Err(Error::InvalidInput(format!(
                "truth length {} does not match {} columns",
                truth.len(),
                self.n()
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Number of measurements.
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    /// Signal dimension.
    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn noise_variance(&self) -> Option<f64> {
        self.noise_variance
    }

    pub fn truth(&self) -> Option<&DVector<f64>> {
        self.truth.as_ref()
    }

    pub fn is_noise_free(&self) -> bool {
        self.noise_variance == Some(0.0)
    }

    /// Noise variance to use in the posterior: the declared value, or
    /// [`NOISE_FREE_VARIANCE`] for exact measurements.
    pub fn effective_noise_variance(&self) -> Option<f64> {
        self.noise_variance.map(|v| {
            if v == 0.0 {
                NOISE_FREE_VARIANCE
            } else {
                v
            }
        })
    }
}

/// Prior parameters: coupling `beta`, Gamma hyperprior `(a, b)` on the
/// sparsity hyperparameters, update constant `kappa`, and Gamma hyperprior
/// `(c, d)` on the noise precision.
///
/// The hyperprior density is taken as `alpha^a exp(-b alpha)` (not the
/// textbook `alpha^(a-1)`), which is what the closed-form update assumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub kappa: f64,
    pub c: f64,
    pub d: f64,
}

/// The default rate `b` is much smaller than the customary `1e-4`: with
/// unit-norm signals, `alpha <= kappa / b` must be able to exceed the pruning
/// threshold or off-support coefficients keep a variance of order `1e-4` and
/// exact recovery is out of reach.
impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            a: 0.5,
            b: 1e-12,
            kappa: 0.5,
            c: 1e-4,
            d: 1e-4,
        }
    }
}

impl PriorConfig {
    /// Widest admissible gap `kappa - a` (interior coefficients).
    pub const MAX_KAPPA_OFFSET: f64 = 1.5;

    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidInput(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.kappa >= self.a && self.kappa <= self.a + Self::MAX_KAPPA_OFFSET) {
            return Err(Error::InvalidInput(format!(
                "kappa must lie in [a, a + 1.5] = [{}, {}], got {}",
                self.a,
                self.a + Self::MAX_KAPPA_OFFSET,
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Non-negative sparsity hyperparameters, one per coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams(DVector<f64>);

impl HyperParams {
    pub fn new(alpha: DVector<f64>) -> Result<Self> {
        check_alpha(alpha.as_slice())?;
        Ok(Self(alpha))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, value))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether coefficient `i` is pruned from the active system.
    pub fn is_pruned(&self, i: usize) -> bool {
        self.0[i] > PRUNE_THRESHOLD
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    match alpha.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        Some(i) => Err(Error::InvalidInput(format!(
            "hyperparameter {i} must be finite and non-negative, got {}",
            alpha[i]
        ))),
        None => Ok(()),
    }
}

/// `out_i = v_i + beta * (v_{i-1} + v_{i+1})` with zero outside the range.
///
/// The neighbour pair is summed first so that reversing `values` reverses
/// the output bit for bit.
pub(crate) fn neighbour_sum(values: &[f64], beta: f64) -> DVector<f64> {
    let n = values.len();
    DVector::from_fn(n, |i, _| {
        let left = if i > 0 { values[i - 1] } else { 0.0 };
        let right = if i + 1 < n { values[i + 1] } else { 0.0 };
        values[i] + beta * (left + right)
    })
}

/// Diagonal of the coupled prior precision `D`.
pub fn coupled_precision(alpha: &[f64], beta: f64) -> Result<DVector<f64>> {
    check_alpha(alpha)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidInput(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    Ok(neighbour_sum(alpha, beta))
}

/// Which linear-algebra route forms the posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMethod {
    /// Direct when the active set is no larger than `m`, Woodbury otherwise.
    #[default]
    Auto,
    Direct,
    Woodbury,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosteriorOptions {
    pub method: PosteriorMethod,
    /// Form the full covariance matrix, not only its diagonal.
    pub full_covariance: bool,
}

impl Default for PosteriorOptions {
    fn default() -> Self {
        Self {
            method: PosteriorMethod::Auto,
            full_covariance: true,
        }
    }
}

/// Gaussian posterior over the signal for fixed hyperparameters.
///
/// Pruned coefficients have `mu_i = 0` and zero covariance rows/columns.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mu: DVector<f64>,
    /// Full covariance; `None` when only the diagonal was requested.
    pub phi: Option<DMatrix<f64>>,
    pub phi_diag: DVector<f64>,
    pub d_diag: DVector<f64>,
    /// `1 / d_i`.
    pub nu: DVector<f64>,
    pub active: Vec<bool>,
    /// Route actually used (never `Auto`).
    pub method: PosteriorMethod,
    /// Ridge added to the factored matrix, zero when none was needed.
    pub ridge: f64,
    /// Largest `|Phi_ij - Phi_ji|` before symmetrization.
    pub asymmetry: f64,
}

impl Posterior {
    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Posterior mean and full covariance, choosing the route automatically.
pub fn compute_posterior(
    problem: &Problem,
    hp: &HyperParams,
    beta: f64,
    noise_variance: f64,
) -> Result<Posterior> {
    compute_posterior_with(problem, hp, beta, noise_variance, PosteriorOptions::default())
}

pub fn compute_posterior_with(
    problem: &Problem,
    hp: &HyperParams,
    beta: f64,
    noise_variance: f64,
    options: PosteriorOptions,
) -> Result<Posterior> {
    let n = problem.n();
    let m = problem.m();
    if hp.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} hyperparameters for {n} coefficients",
            hp.len()
        )));
    }
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }

    let d_diag = coupled_precision(hp.as_slice(), beta)?;
    let nu = d_diag.map(|d| 1.0 / d);
    let active: Vec<bool> = (0..n).map(|i| !hp.is_pruned(i)).collect();
    let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let s = idx.len();

    let mut mu = DVector::zeros(n);
    let mut phi_diag = DVector::zeros(n);
    let mut phi = options.full_covariance.then(|| DMatrix::zeros(n, n));

    let d_s = DVector::from_iterator(s, idx.iter().map(|&i| d_diag[i]));
    let has_zero_precision = d_s.iter().any(|&d| d <= 0.0);
    let method = match options.method {
        PosteriorMethod::Auto if s <= m || has_zero_precision => PosteriorMethod::Direct,
        PosteriorMethod::Auto => PosteriorMethod::Woodbury,
        PosteriorMethod::Woodbury if has_zero_precision => {
            return Err(Error::InvalidInput(
                "Woodbury route needs strictly positive coupled precision".into(),
            ))
        }
        other => other,
    };

    if s == 0 {
        return Ok(Posterior {
            mu,
            phi,
            phi_diag,
            d_diag,
            nu,
            active,
            method,
            ridge: 0.0,
            asymmetry: 0.0,
        });
    }

    let a_s = problem.a().select_columns(&idx);
    let moments = match method {
        PosteriorMethod::Direct => {
            direct_moments(&a_s, problem.y(), &d_s, noise_variance, options.full_covariance)?
        }
        _ => woodbury_moments(&a_s, problem.y(), &d_s, noise_variance, options.full_covariance)?,
    };

    for (k, &i) in idx.iter().enumerate() {
        mu[i] = moments.mu[k];
        phi_diag[i] = moments.phi_diag[k];
    }
    if let (Some(full), Some(phi_s)) = (phi.as_mut(), moments.phi.as_ref()) {
        for (kc, &j) in idx.iter().enumerate() {
            for (kr, &i) in idx.iter().enumerate() {
                full[(i, j)] = phi_s[(kr, kc)];
            }
        }
    }

    Ok(Posterior {
        mu,
        phi,
        phi_diag,
        d_diag,
        nu,
        active,
        method,
        ridge: moments.ridge,
        asymmetry: moments.asymmetry,
    })
}

/// The MAP estimate of a Gaussian posterior is its mean.
pub fn map_estimate(posterior: &Posterior) -> DVector<f64> {
    posterior.mu.clone()
}

struct Moments {
    mu: DVector<f64>,
    phi: Option<DMatrix<f64>>,
    phi_diag: DVector<f64>,
    ridge: f64,
    asymmetry: f64,
}

/// Cholesky factor of `matrix`, retrying once with a trace-scaled ridge.
fn factor_with_ridge(matrix: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let k = matrix.nrows();
    let trace = matrix.trace();
    let mut retry = matrix.clone();
    if let Some(chol) = Cholesky::new(matrix) {
        return Ok((chol, 0.0));
    }
    let ridge = RIDGE_SCALE * trace / k as f64;
    if !(ridge.is_finite() && ridge > 0.0) {
        return Err(Error::SingularSystem { ridge });
    }
    for i in 0..k {
        retry[(i, i)] += ridge;
    }
    Cholesky::new(retry)
        .map(|chol| (chol, ridge))
        .ok_or(Error::SingularSystem { ridge })
}

fn symmetrize(phi: &mut DMatrix<f64>) -> f64 {
    let k = phi.nrows();
    let mut asymmetry = 0.0_f64;
    for j in 0..k {
        for i in (j + 1)..k {
            let (lo, hi) = (phi[(i, j)], phi[(j, i)]);
            asymmetry = asymmetry.max((lo - hi).abs());
            let avg = 0.5 * (lo + hi);
            phi[(i, j)] = avg;
            phi[(j, i)] = avg;
        }
    }
    asymmetry
}

fn direct_moments(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    d: &DVector<f64>,
    noise_variance: f64,
    full: bool,
) -> Result<Moments> {
    let s = a.ncols();
    let precision_scale = 1.0 / noise_variance;
    let mut precision = a.tr_mul(a) * precision_scale;
    for i in 0..s {
        precision[(i, i)] += d[i];
    }
    let (chol, ridge) = factor_with_ridge(precision)?;
    let mu = chol.solve(&(a.tr_mul(y) * precision_scale));

    if full {
        let mut phi = chol.inverse();
        let asymmetry = symmetrize(&mut phi);
        let phi_diag = phi.diagonal();
        Ok(Moments {
            mu,
            phi: Some(phi),
            phi_diag,
            ridge,
            asymmetry,
        })
    } else {
        // diag(M^{-1}) = column norms of L^{-1}
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(s, s))
            .ok_or(Error::SingularSystem { ridge })?;
        let phi_diag = DVector::from_fn(s, |i, _| l_inv.column(i).norm_squared());
        Ok(Moments {
            mu,
            phi: None,
            phi_diag,
            ridge,
            asymmetry: 0.0,
        })
    }
}

fn woodbury_moments(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    d: &DVector<f64>,
    noise_variance: f64,
    full: bool,
) -> Result<Moments> {
    let m = a.nrows();
    let s = a.ncols();
    let d_inv = d.map(|v| 1.0 / v);

    // A D^{-1}
    let mut scaled = a.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= d_inv[j];
    }
    let mut inner = &scaled * a.transpose();
    for i in 0..m {
        inner[(i, i)] += noise_variance;
    }
    let (chol, ridge) = factor_with_ridge(inner)?;
    let mu = a.tr_mul(&chol.solve(y)).component_mul(&d_inv);

    // B = L^{-1} A D^{-1}, so that Phi = D^{-1} - B^T B.
    let b = chol
        .l()
        .solve_lower_triangular(&scaled)
        .ok_or(Error::SingularSystem { ridge })?;
    let phi_diag = DVector::from_fn(s, |i, _| d_inv[i] - b.column(i).norm_squared());

    let (phi, asymmetry) = if full {
        let mut phi = -b.tr_mul(&b);
        for i in 0..s {
            phi[(i, i)] += d_inv[i];
        }
        let asymmetry = symmetrize(&mut phi);
        (Some(phi), asymmetry)
    } else {
        (None, 0.0)
    };

    Ok(Moments {
        mu,
        phi,
        phi_diag,
        ridge,
        asymmetry,
    })
}
