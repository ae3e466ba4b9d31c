//! Command-line harness for the dual EnKF: configuration, the experiment
//! presets and artifact output.

pub mod args;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

pub use config::ExperimentConfig;
pub use error::CliError;

use args::Command;
use output::RunDir;

/// Resolve the configuration for `command`: defaults, then the config file,
/// then flags. The result is validated.
pub fn resolve_config(command: &Command) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &command.common().config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    command.overrides().apply(&mut cfg, command.name());
    cfg.validate(command.name())?;
    Ok(cfg)
}

/// Run `command` with a resolved configuration and return the files written.
pub fn execute(command_name: &str, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut out = RunDir::create(&cfg.output.dir, cfg.output.format)?;
    out.manifest(cfg, command_name)?;
    match command_name {
        "riccati" => {
            experiments::run_riccati(cfg, &mut out)?;
        }
        "enkf" => {
            experiments::run_enkf(cfg, &mut out)?;
        }
        "ga-enkf" => {
            experiments::run_ga(cfg, &mut out)?;
        }
        "rollout" => {
            experiments::run_rollout(cfg, &mut out)?;
        }
        "diagnose" => {
            experiments::run_diagnose(cfg, &mut out)?;
        }
        "smd" => {
            experiments::run_experiment_smd(cfg, &mut out)?;
        }
        "pendulum" => {
            experiments::run_experiment_pendulum(cfg, &mut out)?;
        }
        other => return Err(CliError::Config(format!("unknown command {other}"))),
    }
    Ok(out.written().to_vec())
}

/// Parse-free entry point used by `main`: returns the process exit code.
pub fn run(command: Command) -> i32 {
    let result = resolve_config(&command).and_then(|cfg| execute(command.name(), &cfg));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
