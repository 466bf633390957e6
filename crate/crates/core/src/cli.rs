//! Command-line interface.
//!
//! Exit codes are stable: `0` success, `1` input or validation problem,
//! `2` numerical failure. Diagnostics go to stderr; results (the root value,
//! CSV when no `--out` is given) go to stdout.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{self, ConfigError, RunConfig};
use crate::lattice::LatticeError;
use crate::model::{validate, validate_scheme, SchemeKind};
use crate::oracle;
use crate::schemes::{solve_backward, solve_root, SolveError};
use crate::sim;

/// Largest full-tree/lattice discrepancy `oracle-check` accepts.
pub const ORACLE_CHECK_TOLERANCE: f64 = 1e-10;

#[derive(Parser)]
#[command(
    name = "rbsde",
    version,
    about = "Backward stochastic differential equations reflected between two barriers, solved on a binomial lattice"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration and print the root value y0.
    Solve {
        /// Config file path or preset name.
        config: String,
        /// Number of time steps (falls back to the config's defaults.n).
        #[arg(long)]
        n: Option<usize>,
        /// Scheme: implicit-pen | impexp-pen | implicit-reflected | explicit-reflected.
        #[arg(long)]
        scheme: Option<String>,
        /// Penalization parameter for the penalization schemes.
        #[arg(long)]
        p: Option<f64>,
        /// Also write all grid y-values as CSV to this file.
        #[arg(long, value_name = "FILE")]
        grid_out: Option<PathBuf>,
    },
    /// Root values across step counts and schemes, as CSV.
    Table {
        /// Config file path or preset name.
        config: String,
        /// Comma-separated step counts, e.g. 400,1000,2000,4000.
        #[arg(long = "n-list", value_delimiter = ',')]
        n_list: Vec<usize>,
        /// Comma-separated penalization parameters for penalization schemes.
        #[arg(long = "p-list", value_delimiter = ',')]
        p_list: Vec<f64>,
        /// Comma-separated scheme names.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
        /// Output file (stdout when omitted).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Simulate seeded trajectories through a solved grid, as CSV.
    Sample {
        /// Config file path or preset name.
        config: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        p: Option<f64>,
        /// Seed of the first path; path i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of paths.
        #[arg(long, default_value_t = 1)]
        paths: usize,
        /// Output file (stdout when omitted).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compare the recombining solver against the exhaustive path tree.
    OracleCheck {
        /// Config file path or preset name.
        config: String,
        /// Number of time steps (small: the tree has 2^n paths).
        #[arg(long)]
        n: usize,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        p: Option<f64>,
    },
}

#[derive(Debug, Error)]
enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid problem:\n{0}")]
    Validation(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("full-tree discrepancy {discrepancy:e} exceeds {ORACLE_CHECK_TOLERANCE:e}")]
    OracleMismatch { discrepancy: f64 },
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) | AppError::Validation(_) => 1,
            AppError::Io { .. } => 1,
            AppError::Solve(e) => solve_exit_code(e),
            AppError::OracleMismatch { .. } => 2,
        }
    }
}

fn solve_exit_code(error: &SolveError) -> i32 {
    match error {
        SolveError::InvalidInput(_) | SolveError::BarrierCrossing { .. } => 1,
        SolveError::Lattice(LatticeError::PathDependentBarrier)
        | SolveError::Lattice(LatticeError::PathFunctionalTerminal) => 1,
        SolveError::Lattice(LatticeError::Eval { .. }) | SolveError::Step { .. } => 2,
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), AppError> {
    match command {
        Command::Solve {
            config,
            n,
            scheme,
            p,
            grid_out,
        } => cmd_solve(&config, n, scheme.as_deref(), p, grid_out),
        Command::Table {
            config,
            n_list,
            p_list,
            schemes,
            out,
        } => cmd_table(&config, &n_list, &p_list, &schemes, out),
        Command::Sample {
            config,
            n,
            scheme,
            p,
            seed,
            paths,
            out,
        } => cmd_sample(&config, n, scheme.as_deref(), p, seed, paths, out),
        Command::OracleCheck {
            config,
            n,
            scheme,
            p,
        } => cmd_oracle_check(&config, n, scheme.as_deref(), p),
    }
}

/// Resolve step count and scheme from overrides and the config defaults.
fn resolve_run(
    config: &RunConfig,
    n: Option<usize>,
    scheme: Option<&str>,
    p: Option<f64>,
) -> Result<(usize, SchemeKind), AppError> {
    let n = n.or(config.defaults.n).ok_or_else(|| {
        AppError::Usage("no step count: pass --n or set defaults.n in the config".to_string())
    })?;
    let name = scheme
        .map(str::to_string)
        .or_else(|| config.defaults.scheme.clone())
        .ok_or_else(|| {
            AppError::Usage(
                "no scheme: pass --scheme or set defaults.scheme in the config".to_string(),
            )
        })?;
    let scheme = config::parse_scheme(&name, p.or(config.defaults.p))?;
    Ok((n, scheme))
}

/// Validate and report: warnings go to stderr, errors abort with exit 1.
fn check_problem(
    problem: &crate::model::Problem,
    n: usize,
    scheme: &SchemeKind,
) -> Result<(), AppError> {
    let mut report = validate(problem, n);
    report.merge(validate_scheme(scheme));
    for warning in report.warnings() {
        eprintln!("warning: {}", warning.message);
    }
    if !report.is_ok() {
        let text = report
            .errors()
            .map(|e| format!("  {}", e.message))
            .collect::<Vec<_>>()
            .join("\n");
        return Err(AppError::Validation(text));
    }
    Ok(())
}

fn create_file(path: &PathBuf) -> Result<BufWriter<File>, AppError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| AppError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn write_or_stdout<F>(out: Option<PathBuf>, write: F) -> Result<(), AppError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match out {
        Some(path) => {
            let mut file = create_file(&path)?;
            write(&mut file).map_err(|source| AppError::Io {
                path: path.display().to_string(),
                source,
            })?;
            file.flush().map_err(|source| AppError::Io {
                path: path.display().to_string(),
                source,
            })
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock).and_then(|()| lock.flush()).map_err(|source| {
                AppError::Io {
                    path: "<stdout>".to_string(),
                    source,
                }
            })
        }
    }
}

fn cmd_solve(
    config: &str,
    n: Option<usize>,
    scheme: Option<&str>,
    p: Option<f64>,
    grid_out: Option<PathBuf>,
) -> Result<(), AppError> {
    let config = config::resolve_config(config)?;
    let problem = config.to_problem()?;
    let (n, scheme) = resolve_run(&config, n, scheme, p)?;
    check_problem(&problem, n, &scheme)?;

    let root = match grid_out {
        Some(path) => {
            let solution = solve_backward(&problem, n, scheme)?;
            write_or_stdout(Some(path), |w| sim::write_grid_csv(&solution, w))?;
            solution.root_value()
        }
        None => solve_root(&problem, n, scheme)?,
    };
    println!("{root}");
    Ok(())
}

fn cmd_table(
    config: &str,
    n_list: &[usize],
    p_list: &[f64],
    scheme_names: &[String],
    out: Option<PathBuf>,
) -> Result<(), AppError> {
    if n_list.is_empty() {
        return Err(AppError::Usage(
            "empty step list: pass --n-list n1,n2,...".to_string(),
        ));
    }
    let config = config::resolve_config(config)?;
    let problem = config.to_problem()?;

    let names: Vec<String> = if scheme_names.is_empty() {
        match &config.defaults.scheme {
            Some(name) => vec![name.clone()],
            None => {
                return Err(AppError::Usage(
                    "no schemes: pass --schemes or set defaults.scheme in the config".to_string(),
                ))
            }
        }
    } else {
        scheme_names.to_vec()
    };

    let mut schemes = Vec::new();
    for name in &names {
        let is_penalization = matches!(name.as_str(), "implicit-pen" | "impexp-pen");
        if is_penalization && !p_list.is_empty() {
            for &p in p_list {
                schemes.push(config::parse_scheme(name, Some(p))?);
            }
        } else {
            schemes.push(config::parse_scheme(name, config.defaults.p)?);
        }
    }

    for scheme in &schemes {
        let report = validate_scheme(scheme);
        if !report.is_ok() {
            let text = report
                .errors()
                .map(|e| format!("  {}", e.message))
                .collect::<Vec<_>>()
                .join("\n");
            return Err(AppError::Validation(text));
        }
    }
    let mut distinct = n_list.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    for &n in &distinct {
        let report = validate(&problem, n);
        for warning in report.warnings() {
            eprintln!("warning (n={n}): {}", warning.message);
        }
        if !report.is_ok() {
            let text = report
                .errors()
                .map(|e| format!("  {}", e.message))
                .collect::<Vec<_>>()
                .join("\n");
            return Err(AppError::Validation(text));
        }
    }

    let table = sim::convergence_table(&problem, n_list, &schemes)?;
    write_or_stdout(out, |w| sim::write_table_csv(&table, w))
}

fn cmd_sample(
    config: &str,
    n: Option<usize>,
    scheme: Option<&str>,
    p: Option<f64>,
    seed: u64,
    paths: usize,
    out: Option<PathBuf>,
) -> Result<(), AppError> {
    let config = config::resolve_config(config)?;
    let problem = config.to_problem()?;
    let (n, scheme) = resolve_run(&config, n, scheme, p)?;
    check_problem(&problem, n, &scheme)?;

    let solution = solve_backward(&problem, n, scheme)?;
    let samples: Vec<sim::PathSample> = (0..paths)
        .map(|i| sim::sample_path(&solution, seed.wrapping_add(i as u64)))
        .collect();
    write_or_stdout(out, |w| sim::write_paths_csv(&samples, w))
}

fn cmd_oracle_check(
    config: &str,
    n: usize,
    scheme: Option<&str>,
    p: Option<f64>,
) -> Result<(), AppError> {
    let config = config::resolve_config(config)?;
    let problem = config.to_problem()?;
    let (_, scheme) = resolve_run(&config, Some(n), scheme, p)?;
    check_problem(&problem, n, &scheme)?;

    let discrepancy = oracle::compare_with_recombining(&problem, n, scheme)?;
    println!("{discrepancy}");
    if discrepancy <= ORACLE_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(AppError::OracleMismatch { discrepancy })
    }
}
