//! Gaussian-approximation dual EnKF for nonlinear models.
//!
//! The interaction field is replaced by its constant-gain empirical form
//!
//! ```text
//! I(Y^i) = kappa / (2 (N - 1)) * sum_j (Y^j - n)(c(Y^j) - c_hat)^T (c(Y^i) + c_hat)
//! ```
//!
//! and the correction field is the LQ one evaluated with the ensemble
//! covariance. For linear `c` this reproduces the LQ interaction exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dual_enkf::{
    correction_gain, ensemble_stats, noise_covariance, sample_terminal_with, EnkfOptions, Ensemble,
    EnsembleTrajectory, NoiseSpec, Recorder,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{CostSpec, Objective, SystemModel};
use crate::riccati::time_grid;
use crate::rng::{self, ParticleStreams};

/// Evaluations `c(Y^i)` (columns of `values`) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GaContext {
    pub values: DMatrix<f64>,
    pub mean: DVector<f64>,
}

impl GaContext {
    pub fn new(ens: &Ensemble, cost: &CostSpec) -> Self {
        let q = cost.output().dim();
        let n = ens.len();
        let mut values = DMatrix::zeros(q, n);
        for i in 0..n {
            values.set_column(i, &cost.c(&ens.particle(i)));
        }
        let mean = values.column_mean();
        Self { values, mean }
    }
}

/// Cross-moment `sum_j (Y^j - n)(c(Y^j) - c_hat)^T`, a `d x q` matrix.
fn cross_moment(particles: &DMatrix<f64>, mean: &DVector<f64>, ctx: &GaContext) -> DMatrix<f64> {
    let mut dy = particles.clone();
    for mut col in dy.column_iter_mut() {
        col -= mean;
    }
    let mut dc = ctx.values.clone();
    for mut col in dc.column_iter_mut() {
        col -= &ctx.mean;
    }
    dy * dc.transpose()
}

/// The empirical interaction field for every particle (`d x N`).
pub fn interaction_ga(ens: &Ensemble, ctx: &GaContext, obj: &Objective) -> Result<DMatrix<f64>> {
    obj.validate()?;
    let n = ens.len();
    if n < 2 {
        return Err(Error::InsufficientParticles {
            got: n,
            required: 2,
        });
    }
    if ctx.values.ncols() != n || ctx.mean.len() != ctx.values.nrows() {
        return Err(Error::Shape(
            "GA context does not match the ensemble".into(),
        ));
    }
    let mean = ens.particles().column_mean();
    let gain = cross_moment(ens.particles(), &mean, ctx) * (obj.kappa() / (2.0 * (n as f64 - 1.0)));
    let mut shifted = ctx.values.clone();
    for mut col in shifted.column_iter_mut() {
        col += &ctx.mean;
    }
    Ok(gain * shifted)
}

/// Result of checking the simplifying premises of the Gaussian approximation.
#[derive(Clone, Debug, Serialize)]
pub struct PremiseReport {
    /// Largest `|div a(x)|` over the sampled states.
    pub max_divergence: f64,
    pub constant_input_map: bool,
    pub constant_diffusion: bool,
}

/// Estimate `div a` by central differences and check that `b`, `sigma` are
/// constant at `samples` random states drawn from `N(0, scale^2 I)`.
pub fn check_premises(
    model: &dyn SystemModel,
    samples: usize,
    scale: f64,
    seed: u64,
) -> PremiseReport {
    let d = model.state_dim();
    let mut rng = rng::stream(seed, 0);
    let h = 1e-5;
    let b0 = model.input_map(&DVector::zeros(d));
    let s0 = model.diffusion(&DVector::zeros(d));
    let mut max_div = 0.0f64;
    let mut const_b = true;
    let mut const_s = true;
    for _ in 0..samples {
        let x = DVector::from_fn(d, |_, _| {
            scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let mut div = 0.0;
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            div += (model.drift(&xp)[j] - model.drift(&xm)[j]) / (2.0 * h);
        }
        max_div = max_div.max(div.abs());
        const_b &= (model.input_map(&x) - &b0).amax() <= 1e-12 * (1.0 + b0.amax());
        const_s &= (model.diffusion(&x) - &s0).amax() <= 1e-12 * (1.0 + s0.amax());
    }
    PremiseReport {
        max_divergence: max_div,
        constant_input_map: const_b,
        constant_diffusion: const_s,
    }
}

struct GaStepper<'a> {
    model: &'a dyn SystemModel,
    cost: &'a CostSpec,
    obj: Objective,
    noise: NoiseSpec,
    eta_root: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sigma_cov: DMatrix<f64>,
}

impl<'a> GaStepper<'a> {
    fn new(
        model: &'a dyn SystemModel,
        cost: &'a CostSpec,
        obj: &Objective,
        noise: NoiseSpec,
    ) -> Result<Self> {
        let d = model.state_dim();
        let sigma = model.diffusion(&DVector::zeros(d));
        let m = model.input_dim();
        linalg::check_square(&noise.eta_cov, m, "Cov(eta)")?;
        Ok(Self {
            model,
            cost,
            obj: *obj,
            eta_root: linalg::psd_sqrt(&noise.eta_cov),
            sigma_cov: &sigma * sigma.transpose(),
            sigma,
            noise,
        })
    }

    fn step(
        &self,
        ens: &mut Ensemble,
        stats: &crate::dual_enkf::EnsembleStats,
        dt: f64,
        streams: &mut ParticleStreams,
        step_index: usize,
    ) -> Result<()> {
        let d = ens.dim();
        let m = self.model.input_dim();
        let ctx = GaContext::new(ens, self.cost);
        let interaction = interaction_ga(ens, &ctx, &self.obj)?;
        let k_c = correction_gain(&self.obj, &self.noise, &self.sigma_cov, stats)?;
        let xi = streams.standard_normals(m + self.sigma.ncols());
        let sqrt_dt = dt.sqrt();
        let use_w = self.noise.use_process_noise;

        let particles = ens.particles();
        let mut next = DMatrix::zeros(d, ens.len());
        next.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, out)| {
                let y = particles.column(i).into_owned();
                let mut drift = self.model.drift(&y) + interaction.column(i);
                if let Some(k_c) = &k_c {
                    drift += k_c * (&y - &stats.mean);
                }
                let xi_i = xi.column(i);
                let d_eta = &self.eta_root * xi_i.rows(0, m) * sqrt_dt;
                let mut y_new = &y - drift * dt - self.model.input_map(&y) * d_eta;
                if use_w {
                    y_new -= &self.sigma * xi_i.rows(m, self.sigma.ncols()) * sqrt_dt;
                }
                out.copy_from_slice(y_new.as_slice());
            });
        if !linalg::all_finite(&next) {
            return Err(Error::Divergence {
                step: step_index,
                t: ens.t() - dt,
            });
        }
        *ens = Ensemble::new(next, ens.t() - dt)?;
        Ok(())
    }
}

/// Gaussian-approximation dual EnKF from `T` down to `0`.
#[allow(clippy::too_many_arguments)]
pub fn run_ga_enkf(
    model: &dyn SystemModel,
    cost: &CostSpec,
    obj: &Objective,
    horizon: f64,
    dt: f64,
    n: usize,
    seed: u64,
    options: &EnkfOptions,
) -> Result<EnsembleTrajectory> {
    obj.validate()?;
    let d = model.state_dim();
    if n < d + 1 {
        return Err(Error::InsufficientParticles {
            got: n,
            required: d + 1,
        });
    }
    if cost.c(&DVector::zeros(d)).len() != cost.output().dim() {
        return Err(Error::Shape("output map dimension mismatch".into()));
    }
    let premises = check_premises(model, 20, 1.0, seed);
    if premises.max_divergence > 1e-8 {
        log::warn!(
            "drift is not divergence-free (max |div a| = {:.3e}); proceeding with the Gaussian approximation",
            premises.max_divergence
        );
    }
    if !premises.constant_diffusion {
        log::warn!("diffusion is state dependent; the correction field uses sigma(0)");
    }
    let times = time_grid(horizon, dt)?;
    let noise = noise_covariance(obj, cost)?;
    let stepper = GaStepper::new(model, cost, obj, noise.clone())?;
    let mut streams = ParticleStreams::new(seed, n);
    let mut ens = sample_terminal_with(obj, cost, horizon, &mut streams)?;
    if ens.dim() != d {
        return Err(Error::Shape(
            "terminal cost and model dimensions differ".into(),
        ));
    }
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
