use std::path::PathBuf;
use std::process::ExitCode;

use ata_cli::commands::{cmd_replay, cmd_report, cmd_run, cmd_simulate, cmd_validate, Format, StateDir};
use ata_cli::exit;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ata", version, about = "Closed-loop test generation and repair")]
struct Cli {
    /// Where runs, artifacts and metrics are kept.
    #[arg(long, global = true, default_value = ".ata")]
    state_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the refinement loop to termination.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Seeded Monte-Carlo runs of a synthetic scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        gap_fill_budget: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Per-iteration metrics and first-to-final changes of a run.
    Report {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Re-execute the suite recorded for one iteration.
    Replay {
        #[arg(long)]
        run: String,
        #[arg(long)]
        iteration: u32,
        #[arg(long)]
        per_test_timeout_s: Option<f64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Check a configuration file without running.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let state = StateDir::new(cli.state_dir);
    let mut out = std::io::stdout().lock();
    let result = match cli.command {
        Command::Run { config, run_id } => cmd_run(&config, &state, run_id, &mut out),
        Command::Simulate {
            scenario,
            runs,
            seed,
            gap_fill_budget,
            format,
        } => cmd_simulate(&scenario, runs, seed, gap_fill_budget, format, &mut out),
        Command::Report { run, format } => cmd_report(&state, &run, format, &mut out),
        Command::Replay {
            run,
            iteration,
            per_test_timeout_s,
            format,
        } => cmd_replay(&state, &run, iteration, per_test_timeout_s, format, &mut out),
        Command::Validate { config } => cmd_validate(&config, &mut out),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    };
    ExitCode::from(u8::try_from(code).unwrap_or(exit::OPERATIONAL as u8))
}
