//! Recovery metrics, paired Monte-Carlo sweeps and result files.
//!
//! A sweep varies either `m/n` or `K` over a list of points. For every
//! `(point, trial)` pair one instance is drawn from a seed derived from the
//! master seed, and every algorithm is run on that same instance, so rates
//! are compared on paired data. Trials run on a rayon pool; the output is a
//! pure function of the configuration.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::em::{self, SolverConfig};
use crate::rwl1::{self, RwConfig};
use crate::synthgen::{generate, EnsembleSpec, Instance};
use crate::{Error, Result};

/// A trial succeeds when its NMSE is at most this value.
pub const SUCCESS_THRESHOLD: f64 = 1e-4;

/// `||x - x_hat||^2 / ||x||^2`.
pub fn nmse(x_true: &DVector<f64>, x_hat: &DVector<f64>) -> Result<f64> {
    if x_true.len() != x_hat.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            x_true.len(),
            x_hat.len()
        )));
    }
    let energy = x_true.norm_squared();
    if !(energy > 0.0) {
        return Err(Error::Domain("NMSE of a zero signal is undefined".into()));
    }
    Ok((x_true - x_hat).norm_squared() / energy)
}

pub fn success_rate(records: &[TrialRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Domain("success rate of no trials".into()));
    }
    let hits = records.iter().filter(|r| r.success).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "m_over_n")]
    MOverN,
    #[serde(rename = "k")]
    K,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::MOverN => "m_over_n",
            Axis::K => "k",
        }
    }

    /// The template with this axis set to `value`.
    pub fn apply(self, template: &EnsembleSpec, value: f64) -> Result<EnsembleSpec> {
        let (target, what) = match self {
            Axis::MOverN => (value * template.n as f64, "m"),
            Axis::K => (value, "k"),
        };
        let rounded = target.round();
        if !(rounded >= 1.0) || (target - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "{} = {value} does not give a positive integer {what}",
                self.name()
            )));
        }
        let mut spec = template.clone();
        match self {
            Axis::MOverN => spec.m = rounded as usize,
            Axis::K => spec.k = rounded as usize,
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m_over_n" => Ok(Axis::MOverN),
            "k" => Ok(Axis::K),
            _ => Err(Error::InvalidInput(format!("unknown axis {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Pattern-coupled SBL; `beta = 0` is conventional SBL.
    Sbl,
    /// Coupled reweighted l1; `beta = 0` is conventional reweighted l1.
    Reweighted,
    /// A single unit-weight l1 pass.
    L1,
}

/// An algorithm id such as `pcsbl`, `sbl`, `mrl1`, `rl1`, `l1`, or a family
/// name with an explicit coupling, `pcsbl:0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Algorithm {
    pub id: String,
    pub family: Family,
    pub beta: f64,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s.trim().to_ascii_lowercase();
        let (name, beta) = match id.split_once(':') {
            Some((name, b)) => {
                let beta: f64 = b
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad coupling in {s:?}")))?;
                if !(0.0..=1.0).contains(&beta) {
                    return Err(Error::InvalidInput(format!("coupling must lie in [0, 1]: {s:?}")));
                }
                (name, Some(beta))
            }
            None => (id.as_str(), None),
        };
        let (family, default_beta) = match name {
            "pcsbl" => (Family::Sbl, 1.0),
            "sbl" => (Family::Sbl, 0.0),
            "mrl1" => (Family::Reweighted, 1.0),
            "rl1" => (Family::Reweighted, 0.0),
            "l1" => (Family::L1, 0.0),
            _ => return Err(Error::InvalidInput(format!("unknown algorithm {s:?}"))),
        };
        if beta.is_some() && (family == Family::L1 || name == "sbl" || name == "rl1") {
            return Err(Error::InvalidInput(format!(
                "{name} takes no coupling; use pcsbl:<beta> or mrl1:<beta>"
            )));
        }
        Ok(Self {
            id: id.clone(),
            family,
            beta: beta.unwrap_or(default_beta),
        })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// Outcome of one algorithm on one problem.
#[derive(Clone, Debug)]
pub struct Recovery {
    pub x_hat: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs `algorithm` on `problem`. The SBL family learns the noise variance
/// when the problem has a positive one and treats it as exact otherwise; the
/// l1 family uses the residual budget `sqrt(m * sigma^2)` for noisy data.
pub fn recover(
    algorithm: &Algorithm,
    problem: &crate::Problem,
    solver: &SolverConfig,
    rw: &RwConfig,
) -> Result<Recovery> {
    let noisy = problem.noise_variance().is_some_and(|v| v > 0.0);
    match algorithm.family {
        Family::Sbl => {
            let mut cfg = solver.clone();
            cfg.prior.beta = algorithm.beta;
            cfg.learn_noise = noisy;
            let result = em::solve(problem, &cfg)?;
            Ok(Recovery {
                x_hat: result.x_hat,
                iterations: result.iterations,
                converged: result.converged,
            })
        }
        Family::Reweighted | Family::L1 => {
            let mut cfg = rw.clone();
            if algorithm.family == Family::L1 {
                cfg.outer_iters = 1;
            } else {
                cfg.beta = algorithm.beta;
            }
            if noisy && cfg.noise_budget.is_none() {
                let variance = problem.noise_variance().unwrap_or(0.0);
                cfg.noise_budget = Some((variance * problem.m() as f64).sqrt());
            }
            let result = rwl1::solve_mrl1(problem, &cfg)?;
            Ok(Recovery {
                x_hat: result.x_hat,
                iterations: result.iterations,
                converged: result.converged,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: Axis,
    pub points: Vec<f64>,
    /// Ensemble at which the axis is varied; its seed is ignored.
    pub template: EnsembleSpec,
    pub algorithms: Vec<String>,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub rw: RwConfig,
    /// Record wall-clock time per trial. Off by default so that result files
    /// are reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
    /// Worker threads; `None` uses the global rayon pool.
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub algorithm: String,
    pub axis_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub snr_db: Option<f64>,
    pub nmse: f64,
    pub success: bool,
    pub iterations: usize,
    pub wall_ms: f64,
    /// The solver returned an error; `nmse` is then recorded as 1.
    pub failed: bool,
    pub instance_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub algorithm: String,
    pub axis_value: f64,
    pub success_rate: f64,
    pub mean_nmse: f64,
    pub trials: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub config: SweepConfig,
    /// Ordered by point, then trial, then algorithm in configuration order.
    pub records: Vec<TrialRecord>,
    /// Ordered by algorithm, then point.
    pub summary: Vec<PointSummary>,
}

impl SweepResult {
    pub fn summary_for(&self, algorithm: &str, axis_value: f64) -> Option<&PointSummary> {
        self.summary
            .iter()
            .find(|s| s.algorithm == algorithm && s.axis_value == axis_value)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Instance seed for a `(point, trial)` pair.
pub fn trial_seed(master: u64, point: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(point as u64)) ^ trial as u64)
}

/// SHA-256 over the little-endian bytes of `A`, `y` and the truth.
pub fn instance_hash(instance: &Instance) -> String {
    let mut hasher = Sha256::new();
    let p = &instance.problem;
    for v in p.a().iter().chain(p.y().iter()).chain(instance.truth().iter()) {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn run_trial(
    config: &SweepConfig,
    algorithms: &[Algorithm],
    point: usize,
    trial: usize,
) -> Result<Vec<TrialRecord>> {
    let axis_value = config.points[point];
    let mut spec = config.axis.apply(&config.template, axis_value)?;
    spec.seed = trial_seed(config.master_seed, point, trial);
    let instance = generate(&spec)?;
    let hash = instance_hash(&instance);
    let mut records = Vec::with_capacity(algorithms.len());
    for algorithm in algorithms {
        let start = Instant::now();
        let outcome = recover(algorithm, &instance.problem, &config.solver, &config.rw);
        let wall_ms = if config.timing {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let (error, iterations, failed) = match outcome {
            Ok(r) => (nmse(instance.truth(), &r.x_hat)?, r.iterations, false),
            Err(_) => (1.0, 0, true),
        };
        records.push(TrialRecord {
            algorithm: algorithm.id.clone(),
            axis_value,
            trial,
            seed: spec.seed,
            n: spec.n,
            m: spec.m,
            k: spec.k,
            l: spec.l,
            snr_db: spec.snr_db,
            nmse: error,
            success: !failed && error <= SUCCESS_THRESHOLD,
            iterations,
            wall_ms,
            failed,
            instance_hash: hash.clone(),
        });
    }
    Ok(records)
}

/// Aggregates in a fixed order, so the result does not depend on how the
/// trials were scheduled.
pub fn summarize(records: &[TrialRecord], algorithms: &[String], points: &[f64]) -> Result<Vec<PointSummary>> {
    let mut summary = Vec::with_capacity(algorithms.len() * points.len());
    for algorithm in algorithms {
        for &point in points {
            let group: Vec<TrialRecord> = records
                .iter()
                .filter(|r| &r.algorithm == algorithm && r.axis_value == point)
                .cloned()
                .collect();
            let mean_nmse = group.iter().map(|r| r.nmse).sum::<f64>() / group.len().max(1) as f64;
            summary.push(PointSummary {
                algorithm: algorithm.clone(),
                axis_value: point,
                success_rate: success_rate(&group)?,
                mean_nmse,
                trials: group.len(),
            });
        }
    }
    Ok(summary)
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    if config.points.is_empty() || config.algorithms.is_empty() || config.trials == 0 {
        return Err(Error::InvalidInput(
            "a sweep needs at least one point, one algorithm and one trial".into(),
        ));
    }
    let algorithms: Vec<Algorithm> = config
        .algorithms
        .iter()
        .map(|a| a.parse())
        .collect::<Result<_>>()?;
    let ids: Vec<String> = algorithms.iter().map(|a| a.id.clone()).collect();
    let unique = {
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        sorted.len()
    };
    if unique != ids.len() {
        return Err(Error::InvalidInput("algorithm listed twice".into()));
    }
    for &p in &config.points {
        config.axis.apply(&config.template, p)?;
    }
    config.solver.validate()?;
    config.rw.validate()?;

    let jobs: Vec<(usize, usize)> = (0..config.points.len())
        .flat_map(|p| (0..config.trials).map(move |t| (p, t)))
        .collect();
    let work = || -> Result<Vec<Vec<TrialRecord>>> {
        jobs.par_iter()
            .map(|&(p, t)| run_trial(config, &algorithms, p, t))
            .collect()
    };
    let per_job = match config.threads {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let records: Vec<TrialRecord> = per_job.into_iter().flatten().collect();
    let summary = summarize(&records, &ids, &config.points)?;
    Ok(SweepResult {
        config: config.clone(),
        records,
        summary,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv_writer(path)?;
    let fail = |e: csv::Error| Error::parse(path, e.to_string());
    out.write_record(header).map_err(fail)?;
    for row in rows {
        out.write_record(&row).map_err(fail)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `results.csv`, `summary.csv`, `plotdata.csv` and `config.json`
/// into `dir`, creating it if needed.
pub fn emit_results(result: &SweepResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_rows(
        &dir.join("results.csv"),
        &[
            "algorithm", "axis_value", "trial", "seed", "nmse", "success", "iterations", "wall_ms",
            "failed", "instance_hash",
        ],
        result.records.iter().map(|r| {
            vec![
                r.algorithm.clone(),
                num(r.axis_value),
                r.trial.to_string(),
                r.seed.to_string(),
                num(r.nmse),
                r.success.to_string(),
                r.iterations.to_string(),
                num(r.wall_ms),
                r.failed.to_string(),
                r.instance_hash.clone(),
            ]
        }),
    )?;

    write_rows(
        &dir.join("summary.csv"),
        &["algorithm", "axis_value", "success_rate", "mean_nmse", "trials"],
        result.summary.iter().map(|s| {
            vec![
                s.algorithm.clone(),
                num(s.axis_value),
                num(s.success_rate),
                num(s.mean_nmse),
                s.trials.to_string(),
            ]
        }),
    )?;

    // Wide layout: one row per axis value, two columns per algorithm.
    let algorithms = &result.config.algorithms;
    let ids: Vec<String> = algorithms
        .iter()
        .map(|a| a.parse::<Algorithm>().map(|a| a.id))
        .collect::<Result<_>>()?;
    let mut header = vec![result.config.axis.name().to_string()];
    for id in &ids {
        header.push(format!("{id}_success_rate"));
        header.push(format!("{id}_mean_nmse"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        &dir.join("plotdata.csv"),
        &header_refs,
        result.config.points.iter().map(|&p| {
            let mut row = vec![num(p)];
            for id in &ids {
                match result.summary_for(id, p) {
                    Some(s) => {
                        row.push(num(s.success_rate));
                        row.push(num(s.mean_nmse));
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row
        }),
    )?;

    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(&result.config)
        .map_err(|e| Error::parse(&path, e.to_string()))?;
    let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(file, "{json}").map_err(|e| Error::io(&path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    })?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<Vec<PointSummary>> {
    read_csv(path)
}

#[derive(Deserialize)]
struct ResultRow {
    algorithm: String,
    axis_value: f64,
    trial: usize,
    seed: u64,
    nmse: f64,
    success: bool,
    iterations: usize,
    wall_ms: f64,
    failed: bool,
    instance_hash: String,
}

/// Reads `results.csv` back. Ensemble fields that the file does not carry
/// are taken from `config`.
pub fn read_results(path: &Path, config: &SweepConfig) -> Result<Vec<TrialRecord>> {
    let rows: Vec<ResultRow> = read_csv(path)?;
    rows.into_iter()
        .map(|r| {
            let spec = config.axis.apply(&config.template, r.axis_value)?;
            Ok(TrialRecord {
                algorithm: r.algorithm,
                axis_value: r.axis_value,
                trial: r.trial,
                seed: r.seed,
                n: spec.n,
                m: spec.m,
                k: spec.k,
                l: spec.l,
                snr_db: spec.snr_db,
                nmse: r.nmse,
                success: r.success,
                iterations: r.iterations,
                wall_ms: r.wall_ms,
                failed: r.failed,
                instance_hash: r.instance_hash,
            })
        })
        .collect()
}

pub fn read_config(path: &Path) -> Result<SweepConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Plain-text table of a summary: one row per axis value, success rate and
/// mean NMSE per algorithm.
pub fn format_summary(summary: &[PointSummary], axis: &str) -> String {
    let mut algorithms: Vec<&str> = Vec::new();
    let mut points: Vec<f64> = Vec::new();
    for s in summary {
        if !algorithms.contains(&s.algorithm.as_str()) {
            algorithms.push(&s.algorithm);
        }
        if !points.contains(&s.axis_value) {
            points.push(s.axis_value);
        }
    }
    let mut out = format!("{axis:>10}");
    for a in &algorithms {
        out.push_str(&format!(" | {:>22}", format!("{a} rate / nmse")));
    }
    out.push('\n');
    for &p in &points {
        out.push_str(&format!("{p:>10}"));
        for a in &algorithms {
            match summary.iter().find(|s| s.algorithm == *a && s.axis_value == p) {
                Some(s) => out.push_str(&format!(" | {:>9.3} / {:>10.3e}", s.success_rate, s.mean_nmse)),
                None => out.push_str(&format!(" | {:>22}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
