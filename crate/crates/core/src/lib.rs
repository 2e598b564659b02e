//! Recovery of block-sparse signals from underdetermined linear measurements.
//!
//! The crate provides
//!
//! * [`model`]: the linear measurement problem `y = Ax + w`, the
//!   neighbour-coupled Gaussian prior and its posterior moments;
//! * [`em`]: the pattern-coupled sparse Bayesian learning EM solver (with
//!   known or learned noise variance), which reduces to conventional SBL
//!   when the coupling `beta` is zero;
//! * [`rwl1`]: iteratively reweighted l1 minimisation with neighbour-coupled
//!   weights, backed by an ADMM weighted-l1 solver;
//! * [`synthgen`]: seeded synthetic block-sparse ensembles;
//! * [`bench`]: recovery metrics, Monte-Carlo sweeps and CSV result files.

pub mod bench;
pub mod csvio;
pub mod em;
mod error;
pub mod model;
pub mod rwl1;
pub mod synthgen;

pub use error::{Error, Result};
pub use model::{HyperParams, Posterior, PriorConfig, Problem};
