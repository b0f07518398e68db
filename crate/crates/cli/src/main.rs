use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use flowcast_cli::{run, Command, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "flowcast", version, about = "Voter-transition estimation and modelling pipeline")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for zone and model fits.
    #[arg(long, env = "FLOWCAST_JOBS")]
    jobs: Option<usize>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = RunOptions {
        config: cli.config,
        jobs: cli.jobs,
        out: cli.out,
    };
    match run(cli.command, &opts) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            for f in &outcome.failures {
                eprintln!("failed: {} {}: {}", f.stage, f.context, f.error);
            }
            if let Some(m) = &outcome.manifest {
                println!(
                    "manifest: {} zone estimates, {} anchor models, {} volatility reports, {} failures",
                    m.summary.zone_estimates,
                    m.summary.anchor_models,
                    m.summary.volatility_reports,
                    m.failures.len()
                );
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
