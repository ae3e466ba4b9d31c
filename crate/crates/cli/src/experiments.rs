//! Subcommand bodies. Each writes its artifacts into a [`RunDir`] and returns
//! a serializable summary.

use std::sync::Arc;

use dualenkf_core::closed_loop::{
    objective_from_costs, run_rollouts, simulate_closed_loop, simulate_rollout,
    HamiltonianFeedback, LinearFeedback, Policy, ZeroPolicy,
};
use dualenkf_core::diagnostics::{
    convergence_curve, dual_consistency, mean_std, poisson_check, ConvergenceCurve, FieldScale,
};
use dualenkf_core::dual_enkf::{run_dual_enkf, EnsembleTrajectory};
use dualenkf_core::gauss_approx::{check_premises, run_ga_enkf, PremiseReport};
use dualenkf_core::models::{
    make_pendulum_model, CostSpec, LqInstance, LtiSystem, Objective, SystemModel,
};
use dualenkf_core::riccati::{are_residual, integrate_dre, solve_are};
use dualenkf_core::{DMatrix, DVector, EnkfOptions, GainSchedule, SnapshotMode};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Check, ExperimentConfig, GaModel, GainSource};
use crate::error::CliError;
use crate::output::{
    matrix_cells, matrix_columns, matrix_rows, vector_columns, Cell, RunDir, Table,
};

const ARE_TOL: f64 = 1e-10;
const ARE_T_MAX: f64 = 1e3;

#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveInfo {
    pub variant: &'static str,
    pub theta: Option<f64>,
}

impl From<&Objective> for ObjectiveInfo {
    fn from(obj: &Objective) -> Self {
        Self {
            variant: obj.label(),
            theta: match obj {
                Objective::Soc => None,
                Objective::Rsc { theta } => Some(*theta),
            },
        }
    }
}

fn stats_table(traj: &EnsembleTrajectory, d: usize) -> Table {
    let mut cols = vec!["t".to_string()];
    cols.extend(vector_columns("n", d));
    cols.extend(matrix_columns("S", d, d));
    let mut table = Table::new(cols);
    for (t, st) in traj.times.iter().zip(&traj.stats) {
        let mut row = vec![Cell::Num(*t)];
        row.extend(st.mean.iter().map(|v| Cell::Num(*v)));
        row.extend(matrix_cells(&st.cov));
        table.push(row);
    }
    table
}

fn particles_table(traj: &EnsembleTrajectory, d: usize) -> Option<Table> {
    let snaps = traj.snapshots.as_ref()?;
    let mut cols = vec!["t".to_string(), "particle".to_string()];
    cols.extend(vector_columns("y", d));
    let mut table = Table::new(cols);
    for (t, snap) in traj.times.iter().zip(snaps) {
        for (i, col) in snap.column_iter().enumerate() {
            let mut row = vec![Cell::Num(*t), Cell::from(i)];
            row.extend(col.iter().map(|v| Cell::Num(*v)));
            table.push(row);
        }
    }
    Some(table)
}

/// `t, vec(ktilde), vec(K)` with `K` evaluated through `gain`.
fn gains_table<F>(schedule: &GainSchedule, d: usize, m: usize, gain: F) -> Result<Table, CliError>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>, CliError>,
{
    let mut cols = vec!["t".to_string()];
    cols.extend(matrix_columns("Ktilde", d, d));
    cols.extend(matrix_columns("K", m, d));
    let mut table = Table::new(cols);
    for (t, kt) in schedule.times.iter().zip(&schedule.ktilde) {
        let mut row = vec![Cell::Num(*t)];
        row.extend(matrix_cells(kt));
        row.extend(matrix_cells(&gain(kt)?));
        table.push(row);
    }
    Ok(table)
}

fn known_b_gain(lti: &LtiSystem, cost: &CostSpec, ktilde: &DMatrix<f64>) -> DMatrix<f64> {
    -(cost.r_inv() * lti.b.transpose() * ktilde)
}

fn origin_gain(model: &dyn SystemModel, cost: &CostSpec, ktilde: &DMatrix<f64>) -> DMatrix<f64> {
    let b0 = model.input_map(&DVector::zeros(model.state_dim()));
    -(cost.r_inv() * b0.transpose() * ktilde)
}

#[derive(Clone, Debug, Serialize)]
pub struct RiccatiSummary {
    pub objective: ObjectiveInfo,
    pub horizon: f64,
    pub dt: f64,
    pub p0: Vec<Vec<f64>>,
    pub s0: Vec<Vec<f64>>,
    pub g0: f64,
    pub are: Vec<Vec<f64>>,
    pub are_residual: f64,
    pub dual_consistency: f64,
}

pub fn run_riccati(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<RiccatiSummary, CliError> {
    let (lti, cost) = cfg.lq_system()?;
    let obj = cfg.objective()?;
    let sol = integrate_dre(&obj, &lti, &cost, cfg.enkf.horizon, cfg.enkf.dt)?;
    let d = lti.dim();
    let mut cols = vec!["t".to_string()];
    cols.extend(matrix_columns("P", d, d));
    cols.push("g".into());
    cols.extend(matrix_columns("S", d, d));
    let mut table = Table::new(cols);
    for k in 0..sol.len() {
        let mut row = vec![Cell::Num(sol.times[k])];
        row.extend(matrix_cells(&sol.p[k]));
        row.push(Cell::Num(sol.g[k]));
        row.extend(matrix_cells(&sol.s[k]));
        table.push(row);
    }
    out.table("riccati", &table)?;
    let are = solve_are(&obj, &lti, &cost, ARE_TOL, ARE_T_MAX)?;
    let summary = RiccatiSummary {
        objective: (&obj).into(),
        horizon: cfg.enkf.horizon,
        dt: cfg.enkf.dt,
        p0: matrix_rows(sol.p0()),
        s0: matrix_rows(sol.s0()),
        g0: sol.g[0],
        are_residual: are_residual(&obj, &lti, &cost, &are)?,
        are: matrix_rows(&are),
        dual_consistency: dual_consistency(&sol),
    };
    out.json("riccati_summary", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct EnkfSummary {
    pub objective: ObjectiveInfo,
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub eta_cov: Vec<Vec<f64>>,
    pub correction_active: bool,
    pub s0: Vec<Vec<f64>>,
    pub s0_riccati: Vec<Vec<f64>>,
    pub error: f64,
    pub relative_error: f64,
}

fn enkf_options(cfg: &ExperimentConfig) -> EnkfOptions {
    EnkfOptions {
        prop2: cfg.enkf.prop2,
        snapshots: cfg.enkf.snapshots,
        record_gains: true,
    }
}

pub fn run_enkf(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<EnkfSummary, CliError> {
    let (lti, cost) = cfg.lq_system()?;
    let obj = cfg.objective()?;
    let e = &cfg.enkf;
    let traj = run_dual_enkf(
        &lti,
        &cost,
        &obj,
        e.horizon,
        e.dt,
        e.particles,
        e.seed,
        &enkf_options(cfg),
    )?;
    let d = lti.dim();
    out.table("enkf", &stats_table(&traj, d))?;
    if let Some(t) = particles_table(&traj, d) {
        out.table("particles", &t)?;
    }
    if let Some(schedule) = &traj.gains {
        let t = gains_table(schedule, d, lti.b.ncols(), |k| {
            Ok(known_b_gain(&lti, &cost, k))
        })?;
        out.table("gains", &t)?;
    }
    let sol = integrate_dre(&obj, &lti, &cost, e.horizon, e.dt)?;
    let error = (&traj.initial().cov - sol.s0()).norm();
    let summary = EnkfSummary {
        objective: (&obj).into(),
        particles: e.particles,
        dt: e.dt,
        horizon: e.horizon,
        seed: e.seed,
        eta_cov: matrix_rows(&traj.noise.eta_cov),
        correction_active: traj.noise.correction_active,
        s0: matrix_rows(&traj.initial().cov),
        s0_riccati: matrix_rows(sol.s0()),
        error,
        relative_error: error / sol.s0().norm(),
    };
    out.json("enkf_summary", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct GaSummary {
    pub objective: ObjectiveInfo,
    pub model: GaModel,
    pub particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub premises: PremiseReport,
    pub s0: Vec<Vec<f64>>,
    pub ktilde0: Vec<Vec<f64>>,
    pub gain0: Vec<Vec<f64>>,
}

pub fn run_ga(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<GaSummary, CliError> {
    let obj = cfg.objective()?;
    let (model, cost): (Arc<dyn SystemModel>, CostSpec) = match cfg.enkf.model {
        GaModel::Pendulum => {
            let (m, c) = make_pendulum_model(&cfg.pendulum.params)?;
            (Arc::new(m), c)
        }
        GaModel::Custom => {
            let (lti, c) = cfg.lq_system()?;
            (Arc::new(lti), c)
        }
    };
    let e = &cfg.enkf;
    let traj = run_ga_enkf(
        model.as_ref(),
        &cost,
        &obj,
        e.horizon,
        e.dt,
        e.particles,
        e.seed,
        &enkf_options(cfg),
    )?;
    let d = model.state_dim();
    out.table("enkf", &stats_table(&traj, d))?;
    if let Some(t) = particles_table(&traj, d) {
        out.table("particles", &t)?;
    }
    let schedule = traj.gains.as_ref().expect("gains are recorded");
    let t = gains_table(schedule, d, model.input_dim(), |k| {
        Ok(origin_gain(model.as_ref(), &cost, k))
    })?;
    out.table("gains", &t)?;
    let ktilde0 = &schedule.ktilde[0];
    let summary = GaSummary {
        objective: (&obj).into(),
        model: e.model,
        particles: e.particles,
        dt: e.dt,
        horizon: e.horizon,
        seed: e.seed,
        premises: check_premises(model.as_ref(), 20, 1.0, e.seed),
        s0: matrix_rows(&traj.initial().cov),
        ktilde0: matrix_rows(ktilde0),
        gain0: matrix_rows(&origin_gain(model.as_ref(), &cost, ktilde0)),
    };
    out.json("ga_summary", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct RolloutSummary {
    pub objective: ObjectiveInfo,
    pub gain: GainSource,
    pub rollouts: usize,
    pub value: f64,
    pub std_error: f64,
}

/// Time-varying linear feedback from the Riccati or ensemble backward pass.
pub fn lq_policy(
    cfg: &ExperimentConfig,
    source: GainSource,
    lti: &LtiSystem,
    cost: &CostSpec,
    obj: &Objective,
    horizon: f64,
) -> Result<Box<dyn Policy>, CliError> {
    let schedule = match source {
        GainSource::Zero => {
            return Ok(Box::new(ZeroPolicy {
                input_dim: lti.b.ncols(),
            }))
        }
        GainSource::Riccati => {
            let sol = integrate_dre(obj, lti, cost, horizon, cfg.enkf.dt)?;
            GainSchedule {
                times: sol.times,
                ktilde: sol.p,
                gains: None,
            }
        }
        GainSource::Enkf => {
            let options = EnkfOptions {
                prop2: cfg.enkf.prop2,
                snapshots: SnapshotMode::None,
                record_gains: true,
            };
            let traj = run_dual_enkf(
                lti,
                cost,
                obj,
                horizon,
                cfg.enkf.dt,
                cfg.enkf.particles,
                cfg.enkf.seed,
                &options,
            )?;
            traj.gains.expect("gains are recorded")
        }
    };
    Ok(Box::new(LinearFeedback::new(
        schedule.with_known_b(lti, cost)?,
    )?))
}

pub fn run_rollout(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<RolloutSummary, CliError> {
    let (lti, cost) = cfg.lq_system()?;
    let obj = cfg.objective()?;
    let r = &cfg.rollout;
    let d = lti.dim();
    let m = lti.b.ncols();
    let x0 = if r.x0.is_empty() {
        DVector::from_element(d, 1.0)
    } else {
        DVector::from_vec(r.x0.clone())
    };
    let policy = lq_policy(cfg, r.gain, &lti, &cost, &obj, r.horizon)?;
    let traj = simulate_closed_loop(&lti, policy.as_ref(), &cost, &x0, r.horizon, r.dt, r.seed)?;
    let mut cols = vec!["t".to_string()];
    cols.extend(vector_columns("x", d));
    cols.extend(vector_columns("u", m));
    let mut table = Table::new(cols);
    for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let mut row = vec![Cell::Num(*t)];
        row.extend(x.iter().map(|v| Cell::Num(*v)));
        match traj.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| Cell::Num(*v))),
            None => row.extend((0..m).map(|_| Cell::Empty)),
        }
        table.push(row);
    }
    out.table("trajectory", &table)?;
    let outcomes = run_rollouts(
        &lti,
        policy.as_ref(),
        &cost,
        &x0,
        r.horizon,
        r.dt,
        r.rollouts,
        r.seed,
    )?;
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let est = objective_from_costs(&costs, &obj)?;
    let summary = RolloutSummary {
        objective: (&obj).into(),
        gain: r.gain,
        rollouts: est.rollouts,
        value: est.value,
        std_error: est.std_error,
    };
    out.json("cost", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct PoissonRow {
    pub objective: ObjectiveInfo,
    pub s: f64,
    pub residual_interaction: f64,
    pub residual_correction: f64,
    pub perturbed_interaction: f64,
    pub perturbed_correction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualReport {
    pub objective: ObjectiveInfo,
    pub dt: f64,
    pub consistency: f64,
    pub consistency_half_dt: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "check", rename_all = "lowercase")]
pub enum DiagnoseReport {
    Poisson {
        rows: Vec<PoissonRow>,
    },
    Dual(DualReport),
    Convergence {
        objective: ObjectiveInfo,
        curve: ConvergenceCurve,
        strictly_decreasing: bool,
    },
}

/// Poisson residuals for LQG and for RSC at `+|theta|` and `-|theta|`, each
/// at the stationary `S` of its own Riccati equation.
pub fn poisson_rows(
    lti: &LtiSystem,
    cost: &CostSpec,
    theta: f64,
    spacing: f64,
) -> Result<Vec<PoissonRow>, CliError> {
    let objectives = [
        Objective::Soc,
        Objective::rsc(theta.abs())?,
        Objective::rsc(-theta.abs())?,
    ];
    let mut rows = Vec::new();
    for obj in objectives {
        let p = solve_are(&obj, lti, cost, ARE_TOL, ARE_T_MAX)?;
        if p.shape() != (1, 1) {
            return Err(CliError::Config(
                "the Poisson check needs a scalar system".into(),
            ));
        }
        let s = 1.0 / (obj.kappa() * p[(0, 0)]);
        let width = 8.0 * s.sqrt();
        let base = poisson_check(&obj, lti, cost, s, spacing, width, FieldScale::default())?;
        let perturbed = poisson_check(
            &obj,
            lti,
            cost,
            s,
            spacing,
            width,
            FieldScale {
                interaction: 1.1,
                correction: 1.1,
            },
        )?;
        rows.push(PoissonRow {
            objective: (&obj).into(),
            s,
            residual_interaction: base.interaction,
            residual_correction: base.correction,
            perturbed_interaction: perturbed.interaction,
            perturbed_correction: perturbed.correction,
        });
    }
    Ok(rows)
}

pub fn run_diagnose(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<DiagnoseReport, CliError> {
    let (lti, cost) = cfg.lq_system()?;
    let obj = cfg.objective()?;
    let report = match cfg.diagnose.check {
        Check::Poisson => DiagnoseReport::Poisson {
            rows: poisson_rows(&lti, &cost, cfg.objective.theta, cfg.diagnose.spacing)?,
        },
        Check::Dual => {
            let dt = cfg.enkf.dt;
            let a = dual_consistency(&integrate_dre(&obj, &lti, &cost, cfg.enkf.horizon, dt)?);
            let b = dual_consistency(&integrate_dre(
                &obj,
                &lti,
                &cost,
                cfg.enkf.horizon,
                dt / 2.0,
            )?);
            DiagnoseReport::Dual(DualReport {
                objective: (&obj).into(),
                dt,
                consistency: a,
                consistency_half_dt: b,
                ratio: a / b,
            })
        }
        Check::Convergence => {
            let inst = LqInstance::new(lti, cost, obj)?;
            let curve = convergence_curve(
                &inst,
                &cfg.diagnose.particle_counts,
                cfg.diagnose.seeds,
                cfg.enkf.horizon,
                cfg.enkf.dt,
                cfg.enkf.seed,
            )?;
            DiagnoseReport::Convergence {
                objective: (&obj).into(),
                strictly_decreasing: curve.is_strictly_decreasing(),
                curve,
            }
        }
    };
    out.json("diagnose", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SmdRecord {
    pub variant: &'static str,
    pub theta: Option<f64>,
    #[serde(rename = "N")]
    pub n: usize,
    /// Seed-averaged `|S^N_0 - S_0|_F / |S_0|_F` against the DRE.
    pub error: f64,
    /// Standard error of that average.
    pub stderr: f64,
    pub seeds: usize,
    /// Seed-averaged relative error against the ARE solution.
    pub are_error: f64,
}

fn variants(pos: f64, neg: f64) -> Result<[Objective; 3], CliError> {
    Ok([Objective::Soc, Objective::rsc(pos)?, Objective::rsc(neg)?])
}

pub fn run_experiment_smd(
    cfg: &ExperimentConfig,
    out: &mut RunDir,
) -> Result<Vec<SmdRecord>, CliError> {
    let (lti, cost) = cfg.lq_system()?;
    let e = &cfg.enkf;
    let d = lti.dim();
    let objs = variants(cfg.smd.theta_positive, cfg.smd.theta_negative)?;

    let mut cols = vec!["variant".to_string(), "t".to_string()];
    cols.extend(matrix_columns("SN", d, d));
    cols.extend(matrix_columns("S", d, d));
    let mut table = Table::new(cols);
    let mut records = Vec::new();
    for obj in objs {
        let sol = integrate_dre(&obj, &lti, &cost, e.horizon, e.dt)?;
        let p_are = solve_are(&obj, &lti, &cost, ARE_TOL, ARE_T_MAX)?;
        let s_are = dualenkf_core::riccati::s_from_p(&obj, &p_are)?;
        let runs: Vec<EnsembleTrajectory> = (0..cfg.smd.seeds as u64)
            .into_par_iter()
            .map(|j| {
                let options = EnkfOptions {
                    prop2: e.prop2,
                    snapshots: if j == 0 {
                        SnapshotMode::Stats
                    } else {
                        SnapshotMode::None
                    },
                    record_gains: false,
                };
                run_dual_enkf(
                    &lti,
                    &cost,
                    &obj,
                    e.horizon,
                    e.dt,
                    e.particles,
                    e.seed + j,
                    &options,
                )
            })
            .collect::<Result<_, _>>()?;
        for (t, st) in runs[0].times.iter().zip(&runs[0].stats) {
            let k = sol.times.partition_point(|&s| s < t - 1e-12);
            let mut row = vec![Cell::from(obj.label()), Cell::Num(*t)];
            row.extend(matrix_cells(&st.cov));
            row.extend(matrix_cells(&sol.s[k]));
            table.push(row);
        }
        let rel = |target: &DMatrix<f64>| -> Vec<f64> {
            runs.iter()
                .map(|r| (&r.initial().cov - target).norm() / target.norm())
                .collect()
        };
        let (mean, std) = mean_std(&rel(sol.s0()));
        let (are_mean, _) = mean_std(&rel(&s_are));
        records.push(SmdRecord {
            variant: obj.label(),
            theta: ObjectiveInfo::from(&obj).theta,
            n: e.particles,
            error: mean,
            stderr: std / (cfg.smd.seeds as f64).sqrt(),
            seeds: cfg.smd.seeds,
            are_error: are_mean,
        });
    }
    out.table("smd_trajectories", &table)?;
    out.records("smd_summary", &records)?;
    Ok(records)
}

#[derive(Clone, Debug, Serialize)]
pub struct PendulumRecord {
    pub variant: &'static str,
    pub theta: Option<f64>,
    pub rollouts: usize,
    pub stabilized: usize,
    pub stabilized_fraction: f64,
    /// Objective estimate of the variant (SOC for LQG and the baseline).
    pub cost: f64,
    pub stderr: f64,
}

/// Whether an error state ends inside the stabilization box.
pub fn is_stabilized(e: &DVector<f64>, angle_tol: f64, position_tol: f64) -> bool {
    e[2].abs() < angle_tol && e[0].abs() < position_tol
}

pub fn run_experiment_pendulum(
    cfg: &ExperimentConfig,
    out: &mut RunDir,
) -> Result<Vec<PendulumRecord>, CliError> {
    let p = &cfg.pendulum;
    let (model, cost) = make_pendulum_model(&p.params)?;
    let model: Arc<dyn SystemModel> = Arc::new(model);
    let x0 = DVector::from_vec(p.x0.clone());
    let objs = variants(p.theta_positive, p.theta_negative)?;
    let d = model.state_dim();

    let mut gain_cols = vec!["variant".to_string()];
    gain_cols.extend(matrix_columns("Ktilde", d, d));
    gain_cols.extend(matrix_columns("K", 1, d));
    let mut gains = Table::new(gain_cols);
    let path_cols = [
        "variant",
        "rollout",
        "t",
        "x",
        "x_dot",
        "angle_error",
        "angle_rate",
        "u",
    ];
    let mut paths = Table::new(path_cols.iter().map(|s| s.to_string()).collect());

    let mut policies: Vec<(&'static str, Option<Objective>, Box<dyn Policy>)> = Vec::new();
    for obj in objs {
        let options = EnkfOptions {
            snapshots: SnapshotMode::None,
            record_gains: true,
            ..Default::default()
        };
        let traj = run_ga_enkf(
            model.as_ref(),
            &cost,
            &obj,
            p.horizon,
            p.dt,
            p.particles,
            p.seed,
            &options,
        )?;
        let schedule = traj.gains.expect("gains are recorded").stationary();
        let mut row = vec![Cell::from(obj.label())];
        row.extend(matrix_cells(&schedule.ktilde[0]));
        row.extend(matrix_cells(&origin_gain(
            model.as_ref(),
            &cost,
            &schedule.ktilde[0],
        )));
        gains.push(row);
        let policy = HamiltonianFeedback::new(schedule, model.clone(), &cost);
        policies.push((obj.label(), Some(obj), Box::new(policy)));
    }
    policies.push(("zero", None, Box::new(ZeroPolicy { input_dim: 1 })));

    let rollout_seed = p.seed.wrapping_add(1);
    let mut records = Vec::new();
    for (label, obj, policy) in &policies {
        let outcomes = run_rollouts(
            model.as_ref(),
            policy.as_ref(),
            &cost,
            &x0,
            p.sim_horizon,
            p.sim_dt,
            p.rollouts,
            rollout_seed,
        )?;
        let stabilized = outcomes
            .iter()
            .filter(|o| is_stabilized(&o.final_state, p.angle_tolerance, p.position_tolerance))
            .count();
        let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
        let objective = obj.unwrap_or(Objective::Soc);
        let est = objective_from_costs(&costs, &objective)?;
        records.push(PendulumRecord {
            variant: label,
            theta: obj.as_ref().and_then(|o| ObjectiveInfo::from(o).theta),
            rollouts: p.rollouts,
            stabilized,
            stabilized_fraction: stabilized as f64 / p.rollouts as f64,
            cost: est.value,
            stderr: est.std_error,
        });
        for i in 0..p.saved_paths.min(p.rollouts) {
            let traj = simulate_rollout(
                model.as_ref(),
                policy.as_ref(),
                &cost,
                &x0,
                p.sim_horizon,
                p.sim_dt,
                rollout_seed,
                i as u64,
            )?;
            for (k, (t, e)) in traj.times.iter().zip(&traj.states).enumerate() {
                let mut row = vec![Cell::from(*label), Cell::from(i), Cell::Num(*t)];
                row.extend(e.iter().map(|v| Cell::Num(*v)));
                row.push(
                    traj.controls
                        .get(k)
                        .map_or(Cell::Empty, |u| Cell::Num(u[0])),
                );
                paths.push(row);
            }
        }
    }
    out.table("pendulum_gains", &gains)?;
    out.table("pendulum_paths", &paths)?;
    out.records("pendulum_summary", &records)?;
    Ok(records)
}
