//! `wkh`: simulate the preference dynamics, enumerate stationary points,
//! sweep the friction parameter, export stream fields and run the property
//! suite.
//!
//! Exit codes: 0 success, 1 runtime error or failed check, 2 invalid
//! configuration.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ClusterConfig, Format, RunConfig, Solver, Spacing};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "wkh",
    version,
    about = "Preference dynamics of buyers choosing among sellers"
)]
#[command(allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (stdout when omitted; sidecar files need a path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Friction γ.
    #[arg(long, global = true, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Comma-separated attractiveness values a_1,...,a_N.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    attractiveness: Option<Vec<f64>>,
    /// Two-cluster market as N,k,a_low,a_high (k sellers at a_low).
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    cluster: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory: CSV columns t, J_1..J_N, residual plus an events sidecar.
    Simulate {
        /// Comma-separated initial preferences.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        j0: Option<Vec<f64>>,
        #[arg(long, allow_hyphen_values = true)]
        t_max: Option<f64>,
    },
    /// Stationary points with eigenvalue extremes, stability and provenance.
    Equilibria {
        #[arg(long, value_enum)]
        solver: Option<Solver>,
        /// Multistart Newton starting points.
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Root branches over a γ grid plus a thresholds sidecar.
    Sweep {
        /// homogeneous | two_seller | two_cluster
        #[arg(long)]
        regime: Option<String>,
        /// gamma_min,gamma_max,points
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        grid: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        spacing: Option<Spacing>,
    },
    /// Difference-coordinate field (Δ_1, Δ_2, G_1, G_2) on a square grid, N = 3.
    Streamfield {
        /// min,max of both axes.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        range: Option<Vec<f64>>,
        /// Grid points per axis.
        #[arg(long)]
        points: Option<usize>,
        /// Reference seller label.
        #[arg(long)]
        base: Option<usize>,
    },
    /// Run the property suite; JSON report, exit 1 if any check fails.
    Verify {
        /// Comma-separated check names (default: all).
        #[arg(long, value_delimiter = ',')]
        checks: Option<Vec<String>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Negative control: bias added to dJ_1/dt in every integration.
        #[arg(long, hide = true)]
        corrupt_field: Option<f64>,
    },
}

fn exact_count(v: f64, field: &str) -> Result<usize, CliError> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(CliError::Config(format!(
            "{field}: expected a nonnegative integer, got {v}"
        )))
    }
}

fn merge(cli: &Cli) -> Result<RunConfig, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    cfg.format = c.format.or(cfg.format);
    cfg.seed = c.seed.or(cfg.seed);
    cfg.threads = c.threads.or(cfg.threads);
    cfg.gamma = c.gamma.or(cfg.gamma);
    if c.attractiveness.is_some() {
        cfg.attractiveness = c.attractiveness.clone();
    }
    if let Some(v) = &c.cluster {
        let [n, k, a_low, a_high] = v[..] else {
            return Err(CliError::Config(format!(
                "cluster: expected N,k,a_low,a_high, got {} values",
                v.len()
            )));
        };
        cfg.cluster = Some(ClusterConfig {
            n: exact_count(n, "cluster")?,
            k: exact_count(k, "cluster")?,
            a_low,
            a_high,
        });
        // An explicit cluster replaces attractiveness from the file.
        if c.attractiveness.is_none() {
            cfg.attractiveness = None;
        }
    }
    match &cli.command {
        Command::Simulate { j0, t_max } => {
            if j0.is_some() {
                cfg.initial_condition = j0.clone();
            }
            cfg.integrator.t_max = t_max.or(cfg.integrator.t_max);
        }
        Command::Equilibria { solver, starts } => {
            cfg.equilibria.solver = solver.or(cfg.equilibria.solver);
            cfg.equilibria.starts = starts.or(cfg.equilibria.starts);
        }
        Command::Sweep {
            regime,
            grid,
            spacing,
        } => {
            if regime.is_some() {
                cfg.sweep.regime = regime.clone();
            }
            if let Some(g) = grid {
                let [lo, hi, n] = g[..] else {
                    return Err(CliError::Config(format!(
                        "grid: expected gamma_min,gamma_max,points, got {} values",
                        g.len()
                    )));
                };
                cfg.sweep.gamma_min = Some(lo);
                cfg.sweep.gamma_max = Some(hi);
                cfg.sweep.points = Some(exact_count(n, "grid")?);
                cfg.sweep.gammas = None;
            }
            cfg.sweep.spacing = spacing.or(cfg.sweep.spacing);
        }
        Command::Streamfield {
            range,
            points,
            base,
        } => {
            if let Some(r) = range {
                let [lo, hi] = r[..] else {
                    return Err(CliError::Config(format!(
                        "range: expected min,max, got {} values",
                        r.len()
                    )));
                };
                cfg.streamfield.min = Some(lo);
                cfg.streamfield.max = Some(hi);
            }
            cfg.streamfield.points = points.or(cfg.streamfield.points);
            cfg.streamfield.base = base.or(cfg.streamfield.base);
        }
        Command::Verify {
            checks,
            trials,
            samples,
            ..
        } => {
            if checks.is_some() {
                cfg.verify.checks = checks.clone();
            }
            cfg.verify.trials = trials.or(cfg.verify.trials);
            cfg.verify.samples = samples.or(cfg.verify.samples);
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let cfg = merge(cli)?;
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::Config("threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    commands::ensure_parent(cfg.out.as_deref())?;
    match &cli.command {
        Command::Simulate { .. } => commands::simulate(&cfg).map(|_| true),
        Command::Equilibria { .. } => commands::equilibria(&cfg).map(|_| true),
        Command::Sweep { .. } => commands::sweep_cmd(&cfg).map(|_| true),
        Command::Streamfield { .. } => commands::streamfield(&cfg).map(|_| true),
        Command::Verify { corrupt_field, .. } => {
            commands::verify(&cfg, corrupt_field.unwrap_or(0.0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("wkh: one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("wkh: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
