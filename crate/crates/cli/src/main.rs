use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use posekit_cli::{cmd_simulate, cmd_sweep};

#[derive(Parser)]
#[command(
    name = "pose-sim",
    version,
    about = "Monte-Carlo pose-estimation experiments on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; write per-trial CSV and a JSON summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Run one experiment per value of a parameter; write one summary row each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            config,
            out_csv,
            out_json,
        } => cmd_simulate(config, out_csv.as_deref(), out_json.as_deref()).map(|s| {
            println!(
                "{} trials, {} failed; pass rates: ADD {:.4}, Proj-5 {:.4}, 5°5cm {:.4}",
                s.n_trials, s.n_failed, s.pass_rate_add, s.pass_rate_proj, s.pass_rate_degcm
            );
        }),
        Command::Sweep {
            config,
            param,
            values,
            out_csv,
        } => cmd_sweep(config, param, values, out_csv.as_deref()).map(|rows| {
            for (v, s) in rows {
                println!(
                    "{param}={v}: ADD {:.4}, 5°5cm {:.4}",
                    s.pass_rate_add, s.pass_rate_degcm
                );
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
