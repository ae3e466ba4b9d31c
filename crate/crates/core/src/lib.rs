//! Dual ensemble Kalman filter for stochastic optimal control (SOC) and
//! risk-sensitive control (RSC).
//!
//! The value function `v_t` of the control problem is mapped to the density
//! `exp(-v_t)` (SOC) or `exp(-|theta| v_t)` (RSC), and an interacting particle
//! system simulated backward in time is built whose ensemble samples that
//! density. The optimal feedback gain is then read off the ensemble.
//!
//! Modules:
//! - [`models`]: systems, costs, objectives and benchmark presets
//! - [`riccati`]: reference Riccati solutions
//! - [`dual_enkf`]: the LQ particle system
//! - [`gauss_approx`]: the Gaussian-approximation variant for nonlinear models
//! - [`policy`]: gain extraction
//! - [`closed_loop`]: forward rollouts and cost estimation
//! - [`diagnostics`]: numerical checks against the Riccati and Poisson identities

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod diagnostics;
pub mod dual_enkf;
pub mod error;
pub mod gauss_approx;
pub mod linalg;
pub mod models;
pub mod policy;
pub mod riccati;
pub mod rng;

pub use closed_loop::{CostEstimate, Policy, Trajectory};
pub use dual_enkf::{
    EnkfOptions, Ensemble, EnsembleStats, EnsembleTrajectory, NoiseSpec, Prop2Mode, SnapshotMode,
};
pub use error::{Error, Result};
pub use models::{
    CartPole, CartPoleParams, CostSpec, LqInstance, LtiSystem, Objective, SmdParams, SystemModel,
};
pub use policy::{GainSchedule, HamiltonianOracle};
pub use riccati::RiccatiSolution;

pub use nalgebra::{DMatrix, DVector};
