#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use pcsbl::em::SolverConfig;
use pcsbl::Problem;

pub fn gaussian(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng))
}

pub struct ReferenceRun {
    /// Hyperparameters at the start of every iteration.
    pub alphas: Vec<DVector<f64>>,
    pub x_hat: DVector<f64>,
    pub iterations: usize,
}

/// Textbook sparse Bayesian learning EM with a fixed noise variance:
/// `alpha_i <- kappa / (0.5 (mu_i^2 + Sigma_ii) + b)`, coefficients with
/// `alpha_i > 1e10` dropped for good. Posterior moments through the
/// Woodbury form with an LU solve when there are more active columns than
/// rows, and through an LU solve of the precision matrix otherwise.
pub fn reference_sbl(problem: &Problem, cfg: &SolverConfig) -> ReferenceRun {
    let a = problem.a();
    let y = problem.y();
    let (m, n) = a.shape();
    let s2 = problem.effective_noise_variance().expect("fixed noise variance");
    let (kappa, b) = (cfg.prior.kappa, cfg.prior.b);

    let mut alpha = DVector::from_element(n, cfg.init_alpha);
    let mut alphas = Vec::new();
    let mut x_prev = DVector::zeros(n);
    loop {
        alphas.push(alpha.clone());
        let active: Vec<usize> = (0..n).filter(|&i| alpha[i] <= 1e10).collect();
        let k = active.len();
        let a_s = a.select_columns(&active);
        let (mu_s, sigma_diag) = if k == 0 {
            (DVector::zeros(0), DVector::zeros(0))
        } else if k > m {
            let inv_alpha = DVector::from_iterator(k, active.iter().map(|&i| 1.0 / alpha[i]));
            let scaled = &a_s * DMatrix::from_diagonal(&inv_alpha);
            let c = DMatrix::identity(m, m) * s2 + &scaled * a_s.transpose();
            let lu = c.lu();
            let c_inv_y = lu.solve(y).unwrap();
            let c_inv_scaled = lu.solve(&scaled).unwrap();
            let mu = scaled.tr_mul(&c_inv_y);
            let diag = DVector::from_fn(k, |j, _| {
                inv_alpha[j] - scaled.column(j).dot(&c_inv_scaled.column(j))
            });
            (mu, diag)
        } else {
            let mut precision = a_s.tr_mul(&a_s) / s2;
            for (j, &i) in active.iter().enumerate() {
                precision[(j, j)] += alpha[i];
            }
            let lu = precision.lu();
            let sigma = lu.try_inverse().unwrap();
            let mu = &sigma * a_s.tr_mul(y) / s2;
            (mu, sigma.diagonal())
        };
        let mut mu = DVector::zeros(n);
        let mut second = DVector::zeros(n);
        for (j, &i) in active.iter().enumerate() {
            mu[i] = mu_s[j];
            second[i] = mu_s[j] * mu_s[j] + sigma_diag[j];
        }

        let step = (&mu - &x_prev).norm();
        let iterations = alphas.len();
        if (iterations > 1 && step <= cfg.tol_epsilon) || iterations >= cfg.max_iters {
            return ReferenceRun {
                alphas,
                x_hat: mu,
                iterations,
            };
        }
        for &i in &active {
            alpha[i] = kappa / (0.5 * second[i] + b);
        }
        x_prev = mu;
    }
}
