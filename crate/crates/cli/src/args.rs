use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dualenkf_core::{Prop2Mode, SnapshotMode};

use crate::config::{
    Check, GaModel, GainSource, ObjectiveKind, OutputFormat, Overrides, SystemPreset,
};

#[derive(Debug, Parser)]
#[command(
    name = "dualenkf",
    version,
    about = "Dual ensemble Kalman filter for optimal and risk-sensitive control"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Differential and algebraic Riccati reference solutions.
    Riccati(CommonArgs),
    /// Dual EnKF on a linear-quadratic system.
    Enkf(CommonArgs),
    /// Gaussian-approximation dual EnKF.
    GaEnkf {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        model: Option<GaModel>,
    },
    /// Closed-loop rollouts and cost estimation.
    Rollout {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        gain: Option<GainSource>,
        #[arg(short = 'M', long)]
        rollouts: Option<usize>,
    },
    /// Numerical consistency checks.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        check: Option<Check>,
    },
    /// Spring-mass-damper convergence experiment.
    Smd(CommonArgs),
    /// Cart-pole stabilization experiment.
    Pendulum {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(short = 'M', long)]
        rollouts: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file (a manifest from an earlier run also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub system: Option<SystemPreset>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveKind>,
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
    /// Number of particles.
    #[arg(short = 'N', long = "particles")]
    pub particles: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Horizon.
    #[arg(short = 'T', long = "horizon")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub prop2: Option<Prop2Arg>,
    #[arg(long, value_enum)]
    pub snapshots: Option<SnapshotArg>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Prop2Arg {
    Auto,
    Off,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SnapshotArg {
    None,
    Stats,
    Full,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            system: self.system,
            objective: self.objective,
            theta: self.theta,
            particles: self.particles,
            dt: self.dt,
            horizon: self.horizon,
            seed: self.seed,
            prop2: self.prop2.map(|p| match p {
                Prop2Arg::Auto => Prop2Mode::Auto,
                Prop2Arg::Off => Prop2Mode::Off,
            }),
            snapshots: self.snapshots.map(|s| match s {
                SnapshotArg::None => SnapshotMode::None,
                SnapshotArg::Stats => SnapshotMode::Stats,
                SnapshotArg::Full => SnapshotMode::Full,
            }),
            output: self.output.clone(),
            format: self.format,
            ..Default::default()
        }
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Riccati(_) => "riccati",
            Command::Enkf(_) => "enkf",
            Command::GaEnkf { .. } => "ga-enkf",
            Command::Rollout { .. } => "rollout",
            Command::Diagnose { .. } => "diagnose",
            Command::Smd(_) => "smd",
            Command::Pendulum { .. } => "pendulum",
        }
    }

    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Riccati(c) | Command::Enkf(c) | Command::Smd(c) => c,
            Command::GaEnkf { common, .. }
            | Command::Rollout { common, .. }
            | Command::Diagnose { common, .. }
            | Command::Pendulum { common, .. } => common,
        }
    }

    pub fn overrides(&self) -> Overrides {
        let mut o = self.common().overrides();
        match self {
            Command::GaEnkf { model, .. } => o.model = *model,
            Command::Rollout { gain, rollouts, .. } => {
                o.gain = *gain;
                o.rollouts = *rollouts;
            }
            Command::Diagnose { check, .. } => o.check = *check,
            Command::Pendulum { rollouts, .. } => o.rollouts = *rollouts,
            _ => {}
        }
        o
    }
}
