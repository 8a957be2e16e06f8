//! taillab: scenario runner for fixed points of branching affine
//! recursions over positive matrices.
//!
//! Exit codes: 0 success, 1 hypothesis-audit failure, 2 spectral or
//! analysis failure, 3 missing or invalid input, 4 budget exceeded.

mod emit;
mod run;

use std::path::PathBuf;
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use run::{FullParams, SimulateParams, SpectralParams, TailParams};

#[derive(Parser)]
#[command(
    name = "taillab",
    version,
    about = "Fixed points of branching affine recursions: audit, spectral solve, simulate, tails",
    after_help = "Exit codes: 0 ok, 1 hypothesis-audit failure, 2 spectral/analysis failure,\n\
                  3 missing or invalid input, 4 budget exceeded."
)]
struct Cli {
    /// Output directory for artifacts
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override the scenario file's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = library default)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Audit the declared hypotheses; JSON report on stdout, exit 0 iff all pass
    Check {
        scenario: PathBuf,
        /// Monte Carlo draws per audited moment (finite-support moments are exact)
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
    },
    /// kappa(s) curve with MC upper bounds, optional chi solve and Lyapunov reports
    Spectral {
        scenario: PathBuf,
        /// Sphere mesh size K
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// kappa evaluation points "a:b:step"
        #[arg(long, default_value = "0.0:2.0:0.1")]
        s_grid: String,
        /// Solve N kappa(chi) = 1 and attach the solution at chi
        #[arg(long)]
        chi: bool,
        /// Product length of the MC bound u_n^(1/n)
        #[arg(long, default_value_t = 8)]
        mc_n: usize,
        /// MC trials per s value
        #[arg(long, default_value_t = 2_000)]
        mc_trials: usize,
    },
    /// Sample truncated fixed points on branching trees
    Simulate {
        scenario: PathBuf,
        /// Truncation depth, or "auto" to plan from a pilot decay fit
        #[arg(long, default_value = "auto")]
        depth: String,
        /// Truncation error target for auto depth
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        /// Sphere mesh size K for auto-depth planning
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// Deepest level of the moment-decay study in levels.csv
        #[arg(long, default_value_t = 8)]
        level_n: usize,
        /// Moment order of the decay study (default: the scenario's s2)
        #[arg(long)]
        level_s: Option<f64>,
        /// Trees behind each levels.csv row
        #[arg(long, default_value_t = 20_000)]
        level_samples: usize,
        /// Per-sample tree node cap
        #[arg(long, default_value_t = 1 << 27)]
        node_budget: u64,
    },
    /// Tail analysis of a samples file: survival curves, indices, constants
    Tail {
        scenario: PathBuf,
        /// Headerless CSV of fixed-point samples, one row per draw
        samples: PathBuf,
        /// Sphere mesh size K when solving in-process
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// Take chi and alpha from spectral.json in the output directory
        #[arg(long)]
        use_spectral: bool,
        /// Tail window "upper:lower" in quantile units
        #[arg(long, default_value = "0.01:0.0001")]
        quantile_window: String,
        /// Hill order statistic (0 = automatic)
        #[arg(long, default_value_t = 0)]
        hill_k: usize,
        /// Smoothing grid "lo:hi:count" in log scale
        #[arg(long, default_value = "-4.0:8.0:49")]
        t_grid: String,
    },
    /// check + spectral + simulate + tail in sequence with one manifest
    Full {
        scenario: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        #[arg(long, default_value_t = 256)]
        grid: usize,
        #[arg(long, default_value = "0.0:2.0:0.1")]
        s_grid: String,
        #[arg(long, default_value_t = 8)]
        mc_n: usize,
        #[arg(long, default_value_t = 2_000)]
        mc_trials: usize,
        #[arg(long, default_value = "auto")]
        depth: String,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        level_n: usize,
        #[arg(long)]
        level_s: Option<f64>,
        #[arg(long, default_value_t = 20_000)]
        level_samples: usize,
        #[arg(long, default_value_t = 1 << 27)]
        node_budget: u64,
        #[arg(long, default_value = "0.01:0.0001")]
        quantile_window: String,
        #[arg(long, default_value_t = 0)]
        hill_k: usize,
        #[arg(long, default_value = "-4.0:8.0:49")]
        t_grid: String,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            exit(code);
        }
    };
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .expect("worker pool built once at startup");
    }

    let result = match &cli.cmd {
        Cmd::Check { scenario, trials } => run::cmd_check(scenario, cli.seed, *trials),
        Cmd::Spectral {
            scenario,
            grid,
            s_grid,
            chi,
            mc_n,
            mc_trials,
        } => run::cmd_spectral(
            scenario,
            cli.seed,
            &cli.out,
            &SpectralParams {
                grid_k: *grid,
                s_grid,
                chi: *chi,
                mc_n: *mc_n,
                mc_trials: *mc_trials,
            },
        ),
        Cmd::Simulate {
            scenario,
            depth,
            eps,
            samples,
            grid,
            level_n,
            level_s,
            level_samples,
            node_budget,
        } => run::cmd_simulate(
            scenario,
            cli.seed,
            &cli.out,
            &SimulateParams {
                depth,
                eps: *eps,
                samples: *samples,
                grid_k: *grid,
                level_n: *level_n,
                level_s: *level_s,
                level_samples: *level_samples,
                node_budget: *node_budget,
            },
        ),
        Cmd::Tail {
            scenario,
            samples,
            grid,
            use_spectral,
            quantile_window,
            hill_k,
            t_grid,
        } => run::cmd_tail(
            scenario,
            samples,
            cli.seed,
            &cli.out,
            &TailParams {
                grid_k: *grid,
                use_spectral: *use_spectral,
                quantile_window,
                hill_k: *hill_k,
                t_grid,
                formula_stream: 1,
            },
        ),
        Cmd::Full {
            scenario,
            trials,
            grid,
            s_grid,
            mc_n,
            mc_trials,
            depth,
            eps,
            samples,
            level_n,
            level_s,
            level_samples,
            node_budget,
            quantile_window,
            hill_k,
            t_grid,
        } => run::cmd_full(
            scenario,
            cli.seed,
            &cli.out,
            &FullParams {
                audit_trials: *trials,
                spectral: SpectralParams {
                    grid_k: *grid,
                    s_grid,
                    chi: true,
                    mc_n: *mc_n,
                    mc_trials: *mc_trials,
                },
                simulate: SimulateParams {
                    depth,
                    eps: *eps,
                    samples: *samples,
                    grid_k: *grid,
                    level_n: *level_n,
                    level_s: *level_s,
                    level_samples: *level_samples,
                    node_budget: *node_budget,
                },
                tail: TailParams {
                    grid_k: *grid,
                    use_spectral: false,
                    quantile_window,
                    hill_k: *hill_k,
                    t_grid,
                    formula_stream: 1,
                },
            },
        ),
    };

    match result {
        Ok(code) => exit(code),
        Err(e) => {
            eprintln!("error: {}", e.message());
            exit(e.code());
        }
    }
}
