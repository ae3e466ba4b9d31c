//! Forward simulation of the controlled SDE and Monte-Carlo estimation of the
//! SOC and RSC objectives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{CostSpec, Objective, SystemModel};
use crate::policy::GainSchedule;
use crate::riccati::time_grid;
use crate::rng;

/// Causal feedback law `u = policy(t, x)`.
pub trait Policy: Send + Sync {
    fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
}

/// `u = K_t x` with zero-order-held gains.
pub struct LinearFeedback {
    schedule: GainSchedule,
}

impl LinearFeedback {
    pub fn new(schedule: GainSchedule) -> Result<Self> {
        if schedule.gains.is_none() {
            return Err(Error::Domain(
                "linear feedback needs a schedule with known-B gains".into(),
            ));
        }
        Ok(Self { schedule })
    }
}

impl Policy for LinearFeedback {
    fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.schedule.gain_at(t).expect("checked in new") * x
    }
}

/// `u = -R^{-1} b(x)^T ktilde_t x`, the exact minimizer of the Hamiltonian
/// for a model with state-dependent input map.
pub struct HamiltonianFeedback {
    schedule: GainSchedule,
    model: Arc<dyn SystemModel>,
    r_inv: DMatrix<f64>,
}

impl HamiltonianFeedback {
    pub fn new(schedule: GainSchedule, model: Arc<dyn SystemModel>, cost: &CostSpec) -> Self {
        Self {
            schedule,
            model,
            r_inv: cost.r_inv().clone(),
        }
    }
}

impl Policy for HamiltonianFeedback {
    fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        -(&self.r_inv * self.model.input_map(x).transpose() * (self.schedule.ktilde_at(t) * x))
    }
}

pub struct ZeroPolicy {
    pub input_dim: usize,
}

impl Policy for ZeroPolicy {
    fn control(&self, _t: f64, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.input_dim)
    }
}

impl<F> Policy for F
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn control(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self(t, x)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Control applied on `[t_k, t_{k+1})`; one fewer entry than `states`.
    pub controls: Vec<DVector<f64>>,
    pub running_cost: f64,
    pub terminal_cost: f64,
}

impl Trajectory {
    /// Realized `J = int (|c|^2 + |u|_R^2)/2 dt + G(X_T)`.
    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Summary of one rollout when the full path is not needed.
#[derive(Clone, Debug, Serialize)]
pub struct RolloutOutcome {
    pub cost: f64,
    pub final_state: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    model: &dyn SystemModel,
    policy: &dyn Policy,
    cost: &CostSpec,
    x0: &DVector<f64>,
    times: &[f64],
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<Trajectory> {
    let mut x = x0.clone();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut running = 0.0;
    if record {
        states.push(x.clone());
    }
    for k in 0..times.len() - 1 {
        let t = times[k];
        let h = times[k + 1] - t;
        let u = policy.control(t, &x);
        running += cost.running(&x, &u) * h;
        let sigma = model.diffusion(&x);
        let dw = DVector::from_fn(sigma.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        x = &x + (model.drift(&x) + model.input_map(&x) * &u) * h + sigma * dw * h.sqrt();
        if !linalg::vec_finite(&x) || !u.iter().all(|v| v.is_finite()) {
            return Err(Error::TrajectoryDivergence { t: times[k + 1] });
        }
        if record {
            states.push(x.clone());
            controls.push(u);
        }
    }
    if !record {
        states.push(x.clone());
    }
    let terminal = cost.terminal_cost(&x);
    Ok(Trajectory {
        times: if record {
            times.to_vec()
        } else {
            vec![times[times.len() - 1]]
        },
        states,
        controls,
        running_cost: running,
        terminal_cost: terminal,
    })
}

/// Forward Euler-Maruyama of `dX = (a + b U) dt + sigma dW` under `policy`,
/// with left-endpoint quadrature of the running cost.
#[allow(clippy::too_many_arguments)]
pub fn simulate_closed_loop(
    model: &dyn SystemModel,
    policy: &dyn Policy,
    cost: &CostSpec,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_rollout(model, policy, cost, x0, horizon, dt, seed, 0)
}

/// Full path of rollout `index` of [`run_rollouts`] with the same `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_rollout(
    model: &dyn SystemModel,
    policy: &dyn Policy,
    cost: &CostSpec,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    if x0.len() != model.state_dim() {
        return Err(Error::Shape("initial state has the wrong dimension".into()));
    }
    let times = time_grid(horizon, dt)?;
    let mut rng = rng::stream(seed, index);
    simulate(model, policy, cost, x0, &times, &mut rng, true)
}

/// `M` independent rollouts; rollout `i` uses random stream `i`.
#[allow(clippy::too_many_arguments)]
pub fn run_rollouts(
    model: &dyn SystemModel,
    policy: &dyn Policy,
    cost: &CostSpec,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    rollouts: usize,
    seed: u64,
) -> Result<Vec<RolloutOutcome>> {
    if x0.len() != model.state_dim() {
        return Err(Error::Shape("initial state has the wrong dimension".into()));
    }
    let times = time_grid(horizon, dt)?;
    (0..rollouts as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i);
            let traj = simulate(model, policy, cost, x0, &times, &mut rng, false)?;
            Ok(RolloutOutcome {
                cost: traj.total_cost(),
                final_state: traj.final_state().clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub std_error: f64,
    pub rollouts: usize,
    /// `None` for SOC.
    pub theta: Option<f64>,
}

/// SOC: sample mean with standard error. RSC: `log(mean(exp(theta J))) / theta`
/// evaluated with max-subtraction, delta-method standard error.
pub fn objective_from_costs(costs: &[f64], obj: &Objective) -> Result<CostEstimate> {
    obj.validate()?;
    let m = costs.len();
    if m < 2 {
        return Err(Error::Domain("need at least two rollouts".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("non-finite realized cost".into()));
    }
    let mf = m as f64;
    match *obj {
        Objective::Soc => {
            let mean = costs.iter().sum::<f64>() / mf;
            let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (mf - 1.0);
            Ok(CostEstimate {
                value: mean,
                std_error: (var / mf).sqrt(),
                rollouts: m,
                theta: None,
            })
        }
        Objective::Rsc { theta } => {
            let scaled: Vec<f64> = costs.iter().map(|c| theta * c).collect();
            if scaled.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow);
            }
            let shift = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scaled.iter().map(|v| (v - shift).exp()).collect();
            let w_mean = w.iter().sum::<f64>() / mf;
            let w_var = w.iter().map(|v| (v - w_mean).powi(2)).sum::<f64>() / (mf - 1.0);
            let value = (shift + w_mean.ln()) / theta;
            if !value.is_finite() {
                return Err(Error::Overflow);
            }
            let std_error = (w_var / mf).sqrt() / (w_mean * theta.abs());
            Ok(CostEstimate {
                value,
                std_error,
                rollouts: m,
                theta: Some(theta),
            })
        }
    }
}

/// Monte-Carlo estimate of the SOC or RSC objective over `M` rollouts.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost(
    model: &dyn SystemModel,
    policy: &dyn Policy,
    cost: &CostSpec,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    rollouts: usize,
    obj: &Objective,
    seed: u64,
) -> Result<CostEstimate> {
    if rollouts < 2 {
        return Err(Error::Domain("need at least two rollouts".into()));
    }
    let outcomes = run_rollouts(model, policy, cost, x0, horizon, dt, rollouts, seed)?;
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    objective_from_costs(&costs, obj)
}
