//! Subcommand pipeline over a single JSON run config.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::ValueEnum;

pub use config::{LoadedConfig, ModelSpec, RunConfig, SimulateConfig};
pub use error::CliError;
pub use manifest::{Failure, Manifest};
use stages::{Context, StageReport};

/// Stages that write to the output directory, in pipeline order.
pub const STAGE_ORDER: [&str; 4] = ["estimate", "covariates", "model", "report"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Check the config and inputs; writes nothing.
    Validate,
    /// Fit each zone, write estimates, flows.csv and volatility.csv.
    Estimate,
    /// Apply the covariate recipe.
    Covariates,
    /// Fit one multinomial model per anchor.
    Model,
    /// Render tables and SVG charts.
    Report,
    /// Generate the synthetic dataset described in the config.
    Simulate,
    /// validate, estimate, covariates, model and report in turn.
    Pipeline,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    /// Worker threads; all available cores when `None`.
    pub jobs: Option<usize>,
    /// Overrides the config's output directory.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub messages: Vec<String>,
    pub failures: Vec<Failure>,
    pub manifest: Option<Manifest>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        let codes: Vec<u8> = self.failures.iter().map(|f| f.exit_code).collect();
        if codes.is_empty() {
            error::EXIT_OK
        } else if codes.contains(&error::EXIT_VALIDATION) {
            error::EXIT_VALIDATION
        } else if codes.contains(&error::EXIT_ESTIMATION) {
            error::EXIT_ESTIMATION
        } else {
            error::EXIT_IO
        }
    }
}

fn run_stage(name: &str, ctx: &Context, outcome: &mut Outcome) -> Result<(), CliError> {
    let result: Result<StageReport, CliError> = match name {
        "estimate" => stages::estimate(ctx),
        "covariates" => stages::covariates(ctx),
        "model" => stages::model(ctx),
        "report" => stages::report(ctx),
        _ => unreachable!("unknown stage {name}"),
    };
    match result {
        Ok(report) => {
            manifest::write_failures(&ctx.out, name, &report.failures)?;
            outcome.messages.extend(report.messages.into_iter().map(|m| format!("{name}: {m}")));
            outcome.failures.extend(report.failures);
            Ok(())
        }
        Err(err) => {
            let failure = Failure {
                stage: name.into(),
                context: String::new(),
                error: err.to_string(),
                exit_code: err.exit_code(),
            };
            std::fs::create_dir_all(&ctx.out)?;
            manifest::write_failures(&ctx.out, name, std::slice::from_ref(&failure))?;
            manifest::write_manifest(ctx.cfg, &ctx.out)?;
            Err(err)
        }
    }
}

/// Runs one subcommand. Stage-level errors are returned after a manifest
/// recording them has been written; per-zone and per-model failures are
/// collected in the outcome and the remaining work still runs.
pub fn run(command: Command, opts: &RunOptions) -> Result<Outcome, CliError> {
    let cfg = LoadedConfig::load(&opts.config)?;
    if command == Command::Simulate {
        let report = stages::simulate(&cfg, opts.out.as_deref())?;
        return Ok(Outcome {
            messages: report.messages,
            ..Outcome::default()
        });
    }
    cfg.check_settings()?;
    if command == Command::Validate {
        let report = stages::validate(&cfg)?;
        return Ok(Outcome {
            messages: report.messages,
            ..Outcome::default()
        });
    }

    let jobs = match opts.jobs {
        Some(0) => return Err(CliError::Validation("--jobs must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let out = opts.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.config.out_dir));
    let ctx = Context { cfg: &cfg, out, pool };

    let mut outcome = Outcome::default();
    let stage_list: &[&str] = match command {
        Command::Estimate => &["estimate"],
        Command::Covariates => &["covariates"],
        Command::Model => &["model"],
        Command::Report => &["report"],
        Command::Pipeline => {
            outcome.messages.extend(stages::validate(&cfg)?.messages.into_iter().map(|m| format!("validate: {m}")));
            &STAGE_ORDER
        }
        Command::Validate | Command::Simulate => unreachable!(),
    };
    for stage in stage_list {
        run_stage(stage, &ctx, &mut outcome)?;
    }
    outcome.manifest = Some(manifest::write_manifest(&cfg, &ctx.out)?);
    Ok(outcome)
}
