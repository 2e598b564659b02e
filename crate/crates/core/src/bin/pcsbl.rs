use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pcsbl::bench::{self, Algorithm, Axis, Family, SweepConfig};
use pcsbl::em::{self, SolverConfig};
use pcsbl::rwl1::{self, RwConfig};
use pcsbl::synthgen::{generate, EnsembleSpec};
use pcsbl::{csvio, Error, Problem, Result};

/// Block-sparse recovery by pattern-coupled sparse Bayesian learning and
/// reweighted l1.
#[derive(Parser)]
#[command(name = "pcsbl", version)]
struct Cli {
    /// JSON file with default values for the subcommand's options; flags
    /// given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic instance and write A.csv, y.csv, x_true.csv, layout.json.
    Gen(GenArgs),
    /// Recover x from A and y.
    Recover(RecoverArgs),
    /// Run a Monte-Carlo sweep and write result files.
    Bench(BenchArgs),
    /// Print the summary table of a bench output directory.
    Compare(CompareArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GenArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<usize>,
    /// Signal-to-noise ratio in dB; omit for exact measurements.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    snr_db: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RecoverArgs {
    /// pcsbl, sbl, mrl1, rl1 or l1 (optionally family:beta).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    algo: Option<String>,
    #[arg(long = "A")]
    #[serde(rename = "A", skip_serializing_if = "Option::is_none")]
    a: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<PathBuf>,
    /// Known noise variance.
    #[arg(long, conflicts_with = "learn_noise")]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma2: Option<f64>,
    /// Learn the noise variance (SBL family).
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    learn_noise: bool,
    /// Coupling; overrides the value implied by --algo.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    /// Stopping tolerance on the change of the estimate (SBL family).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    /// EM iterations (SBL family) or reweighting rounds (l1 family).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    /// Residual bound for the l1 family; defaults to sqrt(m * sigma2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_budget: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct BenchArgs {
    /// m_over_n or k.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Measurement count when the axis is k.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    /// Nonzero count when the axis is m_over_n.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    snr_db: Option<f64>,
    /// Comma-separated algorithm ids.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    algos: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Record per-trial wall-clock time in results.csv.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    timing: bool,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct CompareArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dir: Option<PathBuf>,
}

/// Overlays the flags given on the command line onto the JSON file.
fn merge<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parse = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut base: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
    let overrides = serde_json::to_value(flags).map_err(|e| parse(e.to_string()))?;
    match (&mut base, overrides) {
        (serde_json::Value::Object(base), serde_json::Value::Object(overrides)) => {
            base.extend(overrides);
        }
        _ => return Err(parse("expected a JSON object".into())),
    }
    serde_json::from_value(base).map_err(|e| parse(e.to_string()))
}

fn required<T>(value: Option<T>, name: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidInput(format!("missing --{name}")))
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("PCSBL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => Err(Error::InvalidInput(format!("PCSBL_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run_gen(args: GenArgs) -> Result<ExitCode> {
    let spec = EnsembleSpec {
        n: required(args.n, "n")?,
        m: required(args.m, "m")?,
        k: required(args.k, "k")?,
        l: required(args.l, "l")?,
        snr_db: args.snr_db,
        seed: required(args.seed, "seed")?,
    };
    let out = required(args.out, "out")?;
    let instance = generate(&spec)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    csvio::write_matrix(&out.join("A.csv"), instance.problem.a())?;
    csvio::write_vector(&out.join("y.csv"), instance.problem.y())?;
    csvio::write_vector(&out.join("x_true.csv"), instance.truth())?;
    let layout = serde_json::json!({
        "spec": spec,
        "blocks": instance.block_layout,
        "fractions": instance.fractions,
        "noise_variance": instance.problem.noise_variance(),
    });
    let path = out.join("layout.json");
    std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&layout).expect("plain data")))
        .map_err(|e| Error::Io { path, source: e })?;
    println!("wrote instance n={} m={} k={} l={} to {}", spec.n, spec.m, spec.k, spec.l, out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_recover(args: RecoverArgs) -> Result<ExitCode> {
    let mut algorithm: Algorithm = required(args.algo, "algo")?.parse()?;
    if let Some(beta) = args.beta {
        if algorithm.family == Family::L1 {
            return Err(Error::InvalidInput("l1 takes no coupling".into()));
        }
        algorithm.beta = beta;
    }
    let a = csvio::read_matrix(&required(args.a, "A")?)?;
    let y = csvio::read_vector(&required(args.y, "y")?)?;
    let out = required(args.out, "out")?;
    let mut problem = Problem::new(a, y)?;
    if let Some(v) = args.sigma2 {
        problem = problem.with_noise_variance(v)?;
    } else if !args.learn_noise {
        problem = problem.with_noise_variance(0.0)?;
    }

    let (x_hat, iterations, converged) = match algorithm.family {
        Family::Sbl => {
            let mut cfg = SolverConfig::default();
            cfg.prior.beta = algorithm.beta;
            cfg.learn_noise = args.learn_noise;
            if let Some(tol) = args.tol {
                cfg.tol_epsilon = tol;
            }
            if let Some(n) = args.max_iters {
                cfg.max_iters = n;
            }
            let r = em::solve(&problem, &cfg)?;
            if let Some(gamma) = r.gamma_final.filter(|_| args.learn_noise) {
                println!("learned noise variance {:e}", 1.0 / gamma);
            }
            (r.x_hat, r.iterations, r.converged)
        }
        Family::Reweighted | Family::L1 => {
            if args.learn_noise {
                return Err(Error::InvalidInput("--learn-noise applies to the SBL family only".into()));
            }
            let mut cfg = RwConfig {
                beta: algorithm.beta,
                ..RwConfig::default()
            };
            if algorithm.family == Family::L1 {
                cfg.outer_iters = 1;
            } else if let Some(n) = args.max_iters {
                cfg.outer_iters = n;
            }
            cfg.noise_budget = match (args.noise_budget, args.sigma2) {
                (Some(b), _) => Some(b),
                (None, Some(v)) if v > 0.0 => Some((v * problem.m() as f64).sqrt()),
                _ => None,
            };
            let r = rwl1::solve_mrl1(&problem, &cfg)?;
            (r.x_hat, r.iterations, r.converged)
        }
    };
    csvio::write_vector(&out, &x_hat)?;
    println!(
        "{algorithm}: {iterations} iterations, {}",
        if converged { "converged" } else { "not converged" }
    );
    Ok(if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run_bench(args: BenchArgs) -> Result<ExitCode> {
    let axis: Axis = required(args.axis, "axis")?.parse()?;
    let n = required(args.n, "n")?;
    let template = EnsembleSpec {
        n,
        m: match axis {
            Axis::MOverN => args.m.unwrap_or(1),
            Axis::K => required(args.m, "m")?,
        },
        k: match axis {
            Axis::MOverN => required(args.k, "k")?,
            Axis::K => args.k.unwrap_or(1),
        },
        l: required(args.l, "l")?,
        snr_db: args.snr_db,
        seed: 0,
    };
    let config = SweepConfig {
        axis,
        points: required(args.points, "points")?,
        template,
        algorithms: required(args.algos, "algos")?,
        trials: args.trials.unwrap_or(100),
        master_seed: required(args.seed, "seed")?,
        solver: SolverConfig::default(),
        rw: RwConfig::default(),
        timing: args.timing,
        threads: threads_from_env()?,
    };
    let out = required(args.out, "out")?;
    let result = bench::run_sweep(&config)?;
    bench::emit_results(&result, &out)?;
    print!("{}", bench::format_summary(&result.summary, axis.name()));
    let failures = result.records.iter().filter(|r| r.failed).count();
    if failures > 0 {
        println!("{failures} trial runs failed (recorded as nmse = 1)");
    }
    Ok(ExitCode::SUCCESS)
}

fn run_compare(args: CompareArgs) -> Result<ExitCode> {
    let dir = required(args.dir, "dir")?;
    let summary = bench::read_summary(&dir.join("summary.csv"))?;
    let axis = bench::read_config(&dir.join("config.json"))
        .map(|c| c.axis.name().to_string())
        .unwrap_or_else(|_| "axis".to_string());
    print!("{}", bench::format_summary(&summary, &axis));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = cli.config.as_deref();
    let outcome = match cli.command {
        Command::Gen(args) => merge(args, file).and_then(run_gen),
        Command::Recover(args) => merge(args, file).and_then(run_recover),
        Command::Bench(args) => merge(args, file).and_then(run_bench),
        Command::Compare(args) => merge(args, file).and_then(run_compare),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
