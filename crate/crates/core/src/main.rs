use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use async_sgd::harness::commands::{print_report, CmdError};
use async_sgd::harness::suite::GRID;
use async_sgd::harness::{check, compare, live, simulate, sweep, Overrides, RunConfig, SuiteOptions, SEED_ENV};
use async_sgd::virtual_iterates::Mutation;

/// Deterministic asynchronous SGD simulator.
///
/// Exit codes: 0 success, 1 invariant or run failure, 2 usage or config error.
#[derive(Parser)]
#[command(name = "async-sgd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run each configured schedule and write per-run CSVs and a JSON summary.
    Simulate(RunArgs),
    /// Asynchronous against minibatch SGD at equal wall-clock time.
    Compare(RunArgs),
    /// Repetitions in parallel, aggregated over seeds.
    Sweep(RunArgs),
    /// Randomized invariant suite.
    Check(CheckArgs),
    /// Real threads sharing one parameter vector.
    Live(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    config: PathBuf,
    /// Noise seed (overrides ASYNC_SGD_SEED and the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    repetitions: Option<u32>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output file prefix.
    #[arg(long)]
    prefix: Option<String>,
    /// Record virtual-iterate residuals (adds a `vres` column).
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite seed (overrides ASYNC_SGD_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of randomized configurations.
    #[arg(long, default_value_t = GRID)]
    cases: u64,
    /// Use a deliberately wrong in-flight lookup; the identity check must fail.
    #[arg(long)]
    inject_bug: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<RunConfig, CmdError> {
    let mut cfg = RunConfig::load(&args.config)?;
    let overrides = Overrides {
        seed: args.seed,
        horizon: args.horizon,
        duration: args.duration,
        repetitions: args.repetitions,
        out_dir: args.out.clone(),
        prefix: args.prefix.clone(),
        diagnostics: args.diagnostics,
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply(&overrides, env.as_deref())?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).context("writing summary")?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8, CmdError> {
    let json = |r: anyhow::Result<()>| r.map_err(|e| CmdError::Usage(format!("{e:#}")));
    match cli.command {
        Command::Simulate(a) => json(print_json(&simulate(&load(&a)?)?))?,
        Command::Compare(a) => json(print_json(&compare(&load(&a)?)?))?,
        Command::Sweep(a) => json(print_json(&sweep(&load(&a)?)?))?,
        Command::Live(a) => json(print_json(&live(&load(&a)?)?))?,
        Command::Check(a) => {
            let seed = match (a.seed, std::env::var(SEED_ENV).ok()) {
                (Some(s), _) => s,
                (None, Some(v)) => v
                    .trim()
                    .parse()
                    .map_err(|_| CmdError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                (None, None) => 0,
            };
            let options = SuiteOptions {
                seed,
                cases: a.cases,
                mutation: if a.inject_bug {
                    Mutation::OffByOnePrev
                } else {
                    Mutation::None
                },
            };
            let summary = check(options, a.json.as_deref())?;
            let _ = print_report(&summary.report, &mut std::io::stdout().lock());
            return Ok(if summary.passed { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
