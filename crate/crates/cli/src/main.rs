//! Batch front end for the stochastic-control toolkit: named experiments,
//! structured-text configs, seeded deterministic runs, and CSV reports.
//!
//! Exit codes: 0 all assertions pass, 1 assertion failure, 2 usage or
//! configuration error, 3 resource-guard error. Outputs are a pure
//! function of (command, config, seed): reports carry no timestamps, and
//! every float is printed with 17 significant digits.

mod commands;
mod config;
mod report;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::Config;
use report::RunOutput;

#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent configuration.
    Config(String),
    /// An exact oracle refused to exceed its enumeration budget.
    Resource(String),
    /// Filesystem failure while writing artifacts.
    Io(String),
}

#[derive(Parser)]
#[command(name = "stochcon", version, about = "Stochastic-control toolkit runner")]
struct Cli {
    /// Structured-text (TOML) configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every pseudo-random draw in the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Output directory for CSV and summary artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Monte Carlo path count (command-specific default when omitted).
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Time-grid step count (command-specific default when omitted).
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Assertion tolerance (command-specific default when omitted).
    #[arg(long, global = true)]
    tol: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quick sanity run: Ito isometry, Kalman rank, Gramian steering.
    CoreSelftest,
    /// Kalman rank test for a deterministic pair (A, B).
    Rank,
    /// Minimum-energy Gramian steering for dy = Ay + Bu.
    Gramian,
    /// Rank test for the stochastic triple (A1, A2, B1).
    StochasticRank,
    /// Random-instance agreement between the rank test and the exact
    /// binomial-tree observability oracle.
    OracleCompare,
    /// Classical counterexamples from norm-optimal control theory.
    Counterexamples {
        #[command(subcommand)]
        which: Counterexample,
    },
    /// Solve a linear modal BSDE by least-squares Monte Carlo and compare
    /// with the exact change-of-measure solution.
    BsdeSolve,
    /// Check the pointwise maximum-principle inequality along a control law.
    MpCheck,
    /// Spike-variation expansion: measured cost slopes against the
    /// Hamiltonian prediction.
    Spike,
    /// Staged spectral null control of the 1-D stochastic heat equation.
    HeatNullControl,
    /// Spectral observability constants and their growth law in the rank.
    HeatObsConstant,
    /// Evaluate the approximate-controllability predicate for a time set.
    HeatApproxPredicate,
    /// Verify the weighted pointwise identity and its large-parameter
    /// asymptotics.
    CarlemanVerify,
}

#[derive(Subcommand)]
enum Counterexample {
    /// Lower bound for the distance of the switching profile to constants.
    EtaBeta,
    /// Explicit degenerate backward pair with vanishing observation.
    DegeneratePair,
    /// Observability obstruction when the control set stops early.
    Obstruction,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CoreSelftest => "core-selftest",
            Command::Rank => "rank",
            Command::Gramian => "gramian",
            Command::StochasticRank => "stochastic-rank",
            Command::OracleCompare => "oracle-compare",
            Command::Counterexamples { which } => match which {
                Counterexample::EtaBeta => "counterexamples eta-beta",
                Counterexample::DegeneratePair => "counterexamples degenerate-pair",
                Counterexample::Obstruction => "counterexamples obstruction",
            },
            Command::BsdeSolve => "bsde-solve",
            Command::MpCheck => "mp-check",
            Command::Spike => "spike",
            Command::HeatNullControl => "heat-null-control",
            Command::HeatObsConstant => "heat-obs-constant",
            Command::HeatApproxPredicate => "heat-approx-predicate",
            Command::CarlemanVerify => "carleman-verify",
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = Cli::parse();
    let started = Instant::now();
    match execute(&cli) {
        Ok((output, config)) => match write_artifacts(&cli, &config, &output) {
            Ok(summary) => {
                print!("{summary}");
                // Wall time is reported on stdout only: artifacts must be
                // byte-identical across repeated (config, seed) runs.
                println!("wall_time_s: {:.3}", started.elapsed().as_secs_f64());
                if output.all_pass() {
                    0
                } else {
                    1
                }
            }
            Err(CliError::Io(msg)) => {
                eprintln!("error: {msg}");
                2
            }
            Err(_) => unreachable!("artifact writing only fails on io"),
        },
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            2
        }
        Err(CliError::Resource(msg)) => {
            eprintln!("resource guard: {msg}");
            3
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn execute(cli: &Cli) -> Result<(RunOutput, Config), CliError> {
    let config = match &cli.config {
        None => Config::empty(),
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Config::parse(raw)?
        }
    };
    let ctx = Ctx {
        config: &config,
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        tol: cli.tol,
    };
    let output = match &cli.command {
        Command::CoreSelftest => commands::core_selftest(&ctx),
        Command::Rank => commands::rank(&ctx),
        Command::Gramian => commands::gramian(&ctx),
        Command::StochasticRank => commands::stochastic_rank_cmd(&ctx),
        Command::OracleCompare => commands::oracle_compare(&ctx),
        Command::Counterexamples { which } => match which {
            Counterexample::EtaBeta => commands::eta_beta(&ctx),
            Counterexample::DegeneratePair => commands::degenerate_pair(&ctx),
            Counterexample::Obstruction => commands::obstruction(&ctx),
        },
        Command::BsdeSolve => commands::bsde_solve(&ctx),
        Command::MpCheck => commands::mp_check(&ctx),
        Command::Spike => commands::spike(&ctx),
        Command::HeatNullControl => commands::heat_null_control(&ctx),
        Command::HeatObsConstant => commands::heat_obs_constant(&ctx),
        Command::HeatApproxPredicate => commands::heat_approx_predicate(&ctx),
        Command::CarlemanVerify => commands::carleman_verify(&ctx),
    }?;
    Ok((output, config))
}

/// Write all artifacts plus the structured-text summary; return the summary
/// so the caller can echo it to stdout.
fn write_artifacts(cli: &Cli, config: &Config, output: &RunOutput) -> Result<String, CliError> {
    let mut summary = String::new();
    let _ = writeln!(summary, "command: {}", cli.command.name());
    let _ = writeln!(summary, "seed: {}", cli.seed);
    if let Some(p) = cli.paths {
        let _ = writeln!(summary, "paths: {p}");
    }
    if let Some(k) = cli.steps {
        let _ = writeln!(summary, "steps: {k}");
    }
    if let Some(t) = cli.tol {
        let _ = writeln!(summary, "tol: {}", report::fmt_f64(t));
    }
    if let Some(path) = &cli.config {
        let _ = writeln!(summary, "config_file: {}", path.display());
        for line in config.raw.lines() {
            let _ = writeln!(summary, "config: {line}");
        }
    }
    for (key, value) in &output.metrics {
        let _ = writeln!(summary, "{key}: {value}");
    }
    for a in &output.assertions {
        let verdict = if a.pass { "pass" } else { "FAIL" };
        let _ = writeln!(summary, "assert {}: {verdict} ({})", a.name, a.detail);
    }
    let _ = writeln!(
        summary,
        "result: {}",
        if output.all_pass() { "pass" } else { "fail" }
    );

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cli.out.display())))?;
    for (name, contents) in &output.files {
        let path = cli.out.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    }
    std::fs::write(cli.out.join("summary.txt"), &summary)
        .map_err(|e| CliError::Io(format!("cannot write summary: {e}")))?;
    Ok(summary)
}
