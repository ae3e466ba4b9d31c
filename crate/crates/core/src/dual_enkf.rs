//! Finite-N dual EnKF for the linear-quadratic setting.
//!
//! Particles are simulated backward from `Y_T ~ N(0, S_T)` with the reversed
//! Euler-Maruyama update
//!
//! ```text
//! Y <- Y - dt (A Y + I(Y) + C(Y)) - B d_eta - sigma dW
//! ```
//!
//! where the interaction field `I` and correction field `C` depend on the
//! ensemble mean and covariance, frozen over each step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{validate_lq_assumptions, CostSpec, LtiSystem, Objective};
use crate::policy::{self, GainSchedule};
use crate::riccati::{s_from_p, time_grid};
use crate::rng::ParticleStreams;

/// Particle states stored column-wise (`d x N`).
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
    pub(crate) t: f64,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>, t: f64) -> Result<Self> {
        let d = particles.nrows();
        let n = particles.ncols();
        if d == 0 {
            return Err(Error::Shape(
                "ensemble state dimension must be positive".into(),
            ));
        }
        if n < d + 1 {
            return Err(Error::InsufficientParticles {
                got: n,
                required: d + 1,
            });
        }
        if !linalg::all_finite(&particles) {
            return Err(Error::Domain("ensemble contains non-finite entries".into()));
        }
        Ok(Self { particles, t })
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn into_particles(self) -> DMatrix<f64> {
        self.particles
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.ncols() == 0
    }

    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.particles.column(i).into_owned()
    }
}

/// Empirical mean and unbiased covariance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl EnsembleStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

fn stats_of(particles: &DMatrix<f64>) -> Result<EnsembleStats> {
    let n = particles.ncols();
    if n < 2 {
        return Err(Error::InsufficientParticles {
            got: n,
            required: 2,
        });
    }
    let mean = particles.column_sum() / n as f64;
    let mut centered = particles.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = linalg::symmetrize(&(&centered * centered.transpose() / (n as f64 - 1.0)));
    Ok(EnsembleStats { mean, cov })
}

/// Mean `n^(N)` and covariance `S^(N) = sum (Y - n)(Y - n)^T / (N - 1)`.
pub fn ensemble_stats(ens: &Ensemble) -> Result<EnsembleStats> {
    let stats = stats_of(&ens.particles)?;
    if !linalg::all_finite(&stats.cov) || !linalg::vec_finite(&stats.mean) {
        return Err(Error::StatisticsOverflow { t: ens.t });
    }
    Ok(stats)
}

/// Exploration-noise covariance and correction switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub eta_cov: DMatrix<f64>,
    pub use_process_noise: bool,
    pub correction_active: bool,
}

/// Default noise configuration: `Cov(eta) = (kappa R)^{-1}` with
/// `kappa = 1` (SOC) or `|theta|` (RSC). The correction field is switched off
/// only for RSC with `theta < 0`.
pub fn noise_covariance(obj: &Objective, cost: &CostSpec) -> Result<NoiseSpec> {
    obj.validate()?;
    Ok(NoiseSpec {
        eta_cov: cost.r_inv() / obj.kappa(),
        use_process_noise: true,
        correction_active: !matches!(obj, Objective::Rsc { theta } if *theta < 0.0),
    })
}

/// Noise configuration that removes the correction field when
/// `B R^{-1} B^T - sigma sigma^T = B Rt B^T` (SOC) or
/// `B R^{-1} B^T - 2 theta sigma sigma^T = theta B Rt B^T` (RSC, theta > 0)
/// has a PSD solution `Rt`. Returns `None` when no such `Rt` exists.
pub fn prop2_noise_override(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
) -> Result<Option<NoiseSpec>> {
    obj.validate()?;
    let d = lti.dim();
    linalg::check_square(cost.r(), lti.b.ncols(), "R")?;
    let d_mat = &lti.b * cost.r_inv() * lti.b.transpose();
    let sigma_cov = lti.process_cov();
    let target = match *obj {
        Objective::Soc => d_mat - sigma_cov,
        Objective::Rsc { theta } if theta > 0.0 => (d_mat - sigma_cov * (2.0 * theta)) / theta,
        Objective::Rsc { .. } => return Ok(None),
    };
    debug_assert_eq!(target.nrows(), d);
    let b_pinv = match lti.b.clone().pseudo_inverse(1e-12) {
        Ok(p) => p,
        Err(_) => return Ok(None),
    };
    let mut r_tilde = linalg::symmetrize(&(&b_pinv * &target * b_pinv.transpose()));
    let residual = (&lti.b * &r_tilde * lti.b.transpose() - &target).norm();
    if residual > 1e-10 * (1.0 + target.norm()) {
        return Ok(None);
    }
    if !linalg::is_positive_semidefinite(&r_tilde, 1e-10) {
        return Ok(None);
    }
    if r_tilde.amax() < 1e-12 {
        r_tilde.fill(0.0);
    }
    Ok(Some(NoiseSpec {
        eta_cov: r_tilde,
        use_process_noise: true,
        correction_active: false,
    }))
}

/// Covariance of the terminal density `exp(-G)`: `S_T = G^{-1}` (SOC) or
/// `(|theta| G)^{-1}` (RSC).
pub fn terminal_covariance(obj: &Objective, cost: &CostSpec) -> Result<DMatrix<f64>> {
    s_from_p(obj, cost.g_matrix()?)
}

pub(crate) fn sample_terminal_with(
    obj: &Objective,
    cost: &CostSpec,
    horizon: f64,
    streams: &mut ParticleStreams,
) -> Result<Ensemble> {
    let s_t = terminal_covariance(obj, cost)?;
    let chol = s_t.clone().cholesky().ok_or_else(|| Error::Singular {
        what: "terminal covariance".into(),
        condition: linalg::condition_number(&s_t),
    })?;
    let z = streams.standard_normals(s_t.nrows());
    Ensemble::new(chol.l() * z, horizon)
}

/// `N` i.i.d. draws from `N(0, S_T)`; deterministic given the seed.
pub fn sample_terminal(obj: &Objective, cost: &CostSpec, n: usize, seed: u64) -> Result<Ensemble> {
    let mut streams = ParticleStreams::new(seed, n);
    sample_terminal_with(obj, cost, 0.0, &mut streams)
}

/// Interaction field: `(kappa / 2) S C^T C (z + n)`.
pub fn field_i_lq(
    z: &DVector<f64>,
    stats: &EnsembleStats,
    obj: &Objective,
    cost: &CostSpec,
) -> Result<DVector<f64>> {
    let c = cost.c_matrix()?;
    Ok(&stats.cov * c.transpose() * (c * (z + &stats.mean)) * (0.5 * obj.kappa()))
}

/// Weight on `Sigma S^{-1} (z - n)` in the correction field.
fn correction_weight(obj: &Objective) -> f64 {
    match *obj {
        Objective::Soc => 0.5,
        Objective::Rsc { theta } if theta > 0.0 => 1.0,
        Objective::Rsc { .. } => 0.0,
    }
}

/// Correction field: `Sigma S^{-1} (z - n) / 2` (SOC), `Sigma S^{-1} (z - n)`
/// (RSC, theta > 0), zero (RSC, theta < 0).
pub fn field_c_lq(
    z: &DVector<f64>,
    stats: &EnsembleStats,
    obj: &Objective,
    lti: &LtiSystem,
) -> Result<DVector<f64>> {
    let w = correction_weight(obj);
    if w == 0.0 {
        return Ok(DVector::zeros(z.len()));
    }
    let s_inv = linalg::regularized_inverse(&stats.cov, "ensemble covariance")?;
    Ok(lti.process_cov() * s_inv * (z - &stats.mean) * w)
}

/// Correction gain `K_C` with `C(z) = K_C (z - n)`, or `None` when the field
/// vanishes identically.
pub(crate) fn correction_gain(
    obj: &Objective,
    noise: &NoiseSpec,
    sigma_cov: &DMatrix<f64>,
    stats: &EnsembleStats,
) -> Result<Option<DMatrix<f64>>> {
    let w = correction_weight(obj);
    if !noise.correction_active || w == 0.0 || sigma_cov.amax() == 0.0 {
        return Ok(None);
    }
    let s_inv = linalg::regularized_inverse(&stats.cov, "ensemble covariance")?;
    Ok(Some(sigma_cov * s_inv * w))
}

/// Precomputed per-run matrices for the LQ backward step.
pub(crate) struct LqStepper {
    obj: Objective,
    a: DMatrix<f64>,
    ctc: DMatrix<f64>,
    sigma_cov: DMatrix<f64>,
    /// `[B L_eta | sigma]`, applied to `m + d_w` standard normals per particle.
    noise_map: DMatrix<f64>,
    noise: NoiseSpec,
}

impl LqStepper {
    pub(crate) fn new(
        lti: &LtiSystem,
        cost: &CostSpec,
        obj: &Objective,
        noise: &NoiseSpec,
    ) -> Result<Self> {
        obj.validate()?;
        let d = lti.dim();
        let m = lti.b.ncols();
        let c = cost.c_matrix()?;
        if c.ncols() != d {
            return Err(Error::Shape(format!(
                "C has {} columns, expected {d}",
                c.ncols()
            )));
        }
        linalg::check_square(&noise.eta_cov, m, "Cov(eta)")?;
        if !linalg::is_positive_semidefinite(&noise.eta_cov, 1e-10) {
            return Err(Error::Domain(
                "Cov(eta) must be positive semi-definite".into(),
            ));
        }
        let dw = lti.sigma.ncols();
        let mut noise_map = DMatrix::zeros(d, m + dw);
        noise_map
            .view_mut((0, 0), (d, m))
            .copy_from(&(&lti.b * linalg::psd_sqrt(&noise.eta_cov)));
        if noise.use_process_noise {
            noise_map.view_mut((0, m), (d, dw)).copy_from(&lti.sigma);
        }
        Ok(Self {
            obj: *obj,
            a: lti.a.clone(),
            ctc: c.transpose() * c,
            sigma_cov: lti.process_cov(),
            noise_map,
            noise: noise.clone(),
        })
    }

    /// Advance `ens` from `t` to `t - dt` using `stats`, the statistics of
    /// the pre-step ensemble.
    pub(crate) fn step(
        &self,
        ens: &mut Ensemble,
        stats: &EnsembleStats,
        dt: f64,
        streams: &mut ParticleStreams,
        step_index: usize,
    ) -> Result<()> {
        let d = ens.dim();
        let k_i = &stats.cov * &self.ctc * (0.5 * self.obj.kappa());
        let k_c = correction_gain(&self.obj, &self.noise, &self.sigma_cov, stats)?;

        // Y_new = (I - dt (A + K_I + K_C)) Y - dt (K_I - K_C) n - noise
        let mut linear = &self.a + &k_i;
        let mut offset_gain = k_i;
        if let Some(k_c) = &k_c {
            linear += k_c;
            offset_gain -= k_c;
        }
        let transition = DMatrix::identity(d, d) - linear * dt;
        let offset = offset_gain * &stats.mean * dt;

        let xi = streams.standard_normals(self.noise_map.ncols());
        let mut next = transition * &ens.particles;
        next -= &self.noise_map * xi * dt.sqrt();
        for mut col in next.column_iter_mut() {
            col -= &offset;
        }
        if !linalg::all_finite(&next) {
            return Err(Error::Divergence {
                step: step_index,
                t: ens.t - dt,
            });
        }
        ens.particles = next;
        ens.t -= dt;
        Ok(())
    }
}

/// One reversed-time Euler-Maruyama step of the LQ particle system.
///
/// The statistics are computed once from the pre-step ensemble. Noise is drawn
/// from `streams`, one stream per particle.
#[allow(clippy::too_many_arguments)]
pub fn step_backward(
    ens: &Ensemble,
    dt: f64,
    lti: &LtiSystem,
    cost: &CostSpec,
    obj: &Objective,
    noise: &NoiseSpec,
    streams: &mut ParticleStreams,
) -> Result<Ensemble> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if ens.t < dt * (1.0 - 1e-9) {
        return Err(Error::Domain(format!(
            "cannot step back by {dt} from t = {}",
            ens.t
        )));
    }
    if streams.len() != ens.len() {
        return Err(Error::Shape(format!(
            "{} random streams for {} particles",
            streams.len(),
            ens.len()
        )));
    }
    if ens.dim() != lti.dim() {
        return Err(Error::Shape("ensemble and model dimensions differ".into()));
    }
    let stepper = LqStepper::new(lti, cost, obj, noise)?;
    let stats = ensemble_stats(ens)?;
    let mut next = ens.clone();
    stepper.step(&mut next, &stats, dt, streams, 0)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotMode {
    /// Statistics at `t = 0` and `t = T` only.
    None,
    /// Statistics at every grid time.
    #[default]
    Stats,
    /// Statistics and particle states at every grid time.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prop2Mode {
    /// Use the reduced-noise configuration when it applies.
    Auto,
    #[default]
    Off,
}

#[derive(Clone, Debug, Default)]
pub struct EnkfOptions {
    pub prop2: Prop2Mode,
    pub snapshots: SnapshotMode,
    /// Record the whitened gain statistic at every grid time.
    pub record_gains: bool,
}

/// Output of a backward ensemble run, stored in increasing time order.
#[derive(Clone, Debug, Serialize)]
pub struct EnsembleTrajectory {
    pub objective: Objective,
    pub n_particles: usize,
    pub noise: NoiseSpec,
    pub times: Vec<f64>,
    pub stats: Vec<EnsembleStats>,
    #[serde(skip)]
    pub snapshots: Option<Vec<DMatrix<f64>>>,
    /// Whitened gain statistic at every grid time, when requested.
    #[serde(skip)]
    pub gains: Option<GainSchedule>,
}

impl EnsembleTrajectory {
    /// Statistics at `t = 0`.
    pub fn initial(&self) -> &EnsembleStats {
        &self.stats[0]
    }

    pub fn terminal(&self) -> &EnsembleStats {
        self.stats.last().expect("trajectory is never empty")
    }
}

/// Collects per-grid-time records during the backward sweep.
pub(crate) struct Recorder {
    mode: SnapshotMode,
    record_gains: bool,
    obj: Objective,
    times: Vec<f64>,
    stats: Vec<EnsembleStats>,
    snapshots: Vec<DMatrix<f64>>,
    gain_times: Vec<f64>,
    ktilde: Vec<DMatrix<f64>>,
}

impl Recorder {
    pub(crate) fn new(options: &EnkfOptions, obj: &Objective) -> Self {
        Self {
            mode: options.snapshots,
            record_gains: options.record_gains,
            obj: *obj,
            times: Vec::new(),
            stats: Vec::new(),
            snapshots: Vec::new(),
            gain_times: Vec::new(),
            ktilde: Vec::new(),
        }
    }

    /// `stats` must be the statistics of `ens` at its current time.
    pub(crate) fn record(
        &mut self,
        ens: &Ensemble,
        stats: &EnsembleStats,
        endpoint: bool,
    ) -> Result<()> {
        if self.record_gains {
            self.gain_times.push(ens.t);
            self.ktilde.push(policy::ktilde(ens, stats, &self.obj)?);
        }
        if self.mode == SnapshotMode::None && !endpoint {
            return Ok(());
        }
        if self.mode == SnapshotMode::Full {
            self.snapshots.push(ens.particles.clone());
        }
        self.times.push(ens.t);
        self.stats.push(stats.clone());
        Ok(())
    }

    pub(crate) fn finish(mut self, n: usize, noise: NoiseSpec) -> EnsembleTrajectory {
        self.times.reverse();
        self.stats.reverse();
        self.snapshots.reverse();
        self.gain_times.reverse();
        self.ktilde.reverse();
        EnsembleTrajectory {
            objective: self.obj,
            n_particles: n,
            noise,
            times: self.times,
            stats: self.stats,
            snapshots: (self.mode == SnapshotMode::Full).then_some(self.snapshots),
            gains: self.record_gains.then_some(GainSchedule {
                times: self.gain_times,
                ktilde: self.ktilde,
                gains: None,
            }),
        }
    }
}

/// Run the dual EnKF from `T` down to `0`.
#[allow(clippy::too_many_arguments)]
pub fn run_dual_enkf(
    lti: &LtiSystem,
    cost: &CostSpec,
    obj: &Objective,
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
    options: &EnkfOptions,
) -> Result<EnsembleTrajectory> {
    validate_lq_assumptions(lti, cost, obj)?.into_result()?;
    let d = lti.dim();
    if n < d + 1 {
        return Err(Error::InsufficientParticles {
            got: n,
            required: d + 1,
        });
    }
    let times = time_grid(horizon, dt)?;
    let noise = match options.prop2 {
        Prop2Mode::Auto => match prop2_noise_override(obj, lti, cost)? {
            Some(spec) => spec,
            None => noise_covariance(obj, cost)?,
        },
        Prop2Mode::Off => noise_covariance(obj, cost)?,
    };
    let stepper = LqStepper::new(lti, cost, obj, &noise)?;
    let mut streams = ParticleStreams::new(seed, n);
    let mut ens = sample_terminal_with(obj, cost, horizon, &mut streams)?;
    let mut recorder = Recorder::new(options, obj);

    let steps = times.len() - 1;
    for k in (1..=steps).rev() {
        let stats = ensemble_stats(&ens)?;
        recorder.record(&ens, &stats, k == steps)?;
        stepper.step(
            &mut ens,
            &stats,
            times[k] - times[k - 1],
            &mut streams,
            steps - k,
        )?;
        ens.t = times[k - 1];
    }
    let stats = ensemble_stats(&ens)?;
    recorder.record(&ens, &stats, true)?;
    Ok(recorder.finish(n, noise))
}
