use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dapriv::report::{emit, sweep_table, EmitFormat};
use dapriv::scenario::{load_scenario, run_sweep, run_with_log, SweepSpec};

/// Exit status when a run completes but an invariant sweep fails.
const VIOLATION: u8 = 2;

#[derive(Parser)]
#[command(name = "dapriv", version, about = "Deterministic medical data exchange simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Summary,
    Records,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario TOML.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "summary")]
    emit: Format,
    /// Replace the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Vary one parameter: `public_threshold=1..5` or `k=2,3,5`.
    #[arg(long)]
    sweep: Option<SweepSpec>,
    /// Seeded runs per sweep value.
    #[arg(long, default_value_t = 1, requires = "sweep")]
    runs: usize,
    /// Also write the event log, one tab-separated record per line.
    #[arg(long, conflicts_with = "sweep")]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(clean) if clean => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(VIOLATION),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether every invariant held.
fn execute(cli: Cli) -> Result<bool> {
    let Command::Run(args) = cli.command;
    let mut scenario = load_scenario(&args.path).with_context(|| format!("loading {}", args.path.display()))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }

    if let Some(sweep) = &args.sweep {
        anyhow::ensure!(args.runs > 0, "--runs must be at least 1");
        let rows = run_sweep(&scenario, sweep, args.runs)?;
        match args.emit {
            Format::Summary => print!("{}", sweep_table(sweep.param.name(), &rows)),
            Format::Records => {
                for row in &rows {
                    println!("{}", serde_json::to_string(row)?);
                }
            }
        }
        return Ok(rows.iter().all(|r| r.violations == 0));
    }

    let artifacts = run_with_log(&scenario);
    let format = match args.emit {
        Format::Summary => EmitFormat::Summary,
        Format::Records => EmitFormat::Records,
    };
    print!("{}", emit(&artifacts.report, format));
    if let Some(path) = &args.log {
        let mut text = String::new();
        for line in artifacts.log.lines() {
            text.push_str(&line);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    for v in artifacts.report.violations() {
        eprintln!("invariant violated: {}: {}", v.name, v.detail);
    }
    Ok(artifacts.report.passed())
}
