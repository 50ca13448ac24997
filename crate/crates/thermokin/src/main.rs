//! Command-line front end: config-driven simulation pipelines plus the
//! acceptance audit. Exit codes: 0 success, 1 configuration error, 2
//! failed acceptance criterion.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use thermokin::accept;
use thermokin::config::{validate_config, RunConfig};
use thermokin::driver::{self, OutputFormat, RunRecord};

#[derive(Parser)]
#[command(
    name = "thermokin",
    about = "Thermostatted kinetic ensembles: coupled particle runs, mean-current ODE, 1-d grid solver, and scaling studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Output directory (created if missing); defaults to the config's
    /// `out` key, then `out/`.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured replica count.
    #[arg(long)]
    seeds: Option<usize>,
    /// Override the configured worker count.
    #[arg(long)]
    threads: Option<usize>,
    /// Time-series format: csv or jsonl.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the mean-current equation and report its rest points.
    SolveCurrent(ConfigArgs),
    /// Run coupled interacting/independent replicas at one ensemble size.
    RunCoupled(ConfigArgs),
    /// Sweep ensemble sizes and fit the convergence report.
    SweepN(ConfigArgs),
    /// Solve the one-dimensional kinetic grid equation.
    Vbe1d(ConfigArgs),
    /// Re-analyze a replica summary file (JSONL) produced by run-coupled
    /// or sweep-n.
    Metrics {
        /// Input JSONL file.
        input: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, short = 'o', default_value = "out")]
        out: PathBuf,
        /// Time-series format: csv or jsonl.
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Run the acceptance audit and print one line per criterion.
    Accept {
        /// Run only this criterion index (1-11).
        #[arg(long)]
        only: Option<usize>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut cfg = match validate_config(&text) {
        Ok(cfg) => cfg,
        Err(violations) => return Err(violations.join("\n")),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

/// Output directory precedence: the flag, then the config key, then `out/`.
fn out_dir(args: &ConfigArgs, cfg: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse::<OutputFormat>().map_err(|e| e.to_string())
}

fn report(record: &RunRecord) {
    match serde_json::to_string_pretty(record) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("could not serialize the run record: {e}"),
    }
}

fn run_pipeline(
    args: &ConfigArgs,
    f: impl FnOnce(&RunConfig, &std::path::Path, OutputFormat) -> thermokin::error::Result<RunRecord>,
) -> ExitCode {
    let parsed = load_config(args).and_then(|cfg| Ok((parse_format(&args.format)?, cfg)));
    let (format, cfg) = match parsed {
        Ok(pair) => pair,
        Err(msg) => {
            eprintln!("configuration error:\n{msg}");
            return ExitCode::from(1);
        }
    };
    match f(&cfg, &out_dir(args, &cfg), format) {
        Ok(record) => {
            report(&record);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run_accept(only: Option<usize>) -> ExitCode {
    let criteria = match only {
        None => accept::run_all(),
        Some(k) => {
            let one = match k {
                1 => accept::criterion_1(),
                2 => accept::criterion_2(),
                3 => accept::criterion_3(),
                4 => accept::criterion_4(),
                5 => accept::criterion_5(),
                6 => accept::criterion_6(),
                7 => accept::criterion_7(),
                8 => accept::criterion_8(),
                9 => accept::criterion_9(),
                10 => accept::criterion_10(),
                11 => accept::criterion_11(),
                _ => {
                    eprintln!("criterion index must be 1..=11, got {k}");
                    return ExitCode::from(1);
                }
            };
            vec![one]
        }
    };
    let mut all_pass = true;
    for c in &criteria {
        println!("{}", c.line());
        all_pass &= c.pass;
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::SolveCurrent(args) => run_pipeline(&args, driver::cmd_solve_current),
        Command::RunCoupled(args) => run_pipeline(&args, driver::cmd_run_coupled),
        Command::SweepN(args) => run_pipeline(&args, driver::cmd_sweep),
        Command::Vbe1d(args) => run_pipeline(&args, driver::cmd_vbe),
        Command::Metrics { input, out, format } => {
            let format = match parse_format(&format) {
                Ok(f) => f,
                Err(msg) => {
                    eprintln!("configuration error:\n{msg}");
                    return ExitCode::from(1);
                }
            };
            match driver::cmd_metrics(&input, &out, format) {
                Ok(record) => {
                    report(&record);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Accept { only } => run_accept(only),
    }
}
