//! Numerical oracles: dual consistency of the Riccati pair, finite-difference
//! residuals of the scalar Poisson equations, Gaussianity checks and
//! particle-count convergence curves.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dual_enkf::{
    field_c_lq, field_i_lq, run_dual_enkf, EnkfOptions, Ensemble, EnsembleStats, SnapshotMode,
};
use crate::error::{Error, Result};
use crate::models::{CostSpec, LqInstance, LtiSystem, Objective};
use crate::riccati::{integrate_dre, RiccatiSolution};

/// `max_t |S_t P_t kappa - I|_F`.
pub fn dual_consistency(sol: &RiccatiSolution) -> f64 {
    let kappa = sol.objective.kappa();
    sol.p
        .iter()
        .zip(&sol.s)
        .map(|(p, s)| {
            let d = p.nrows();
            (s * p * kappa - DMatrix::identity(d, d)).norm()
        })
        .fold(0.0, f64::max)
}

/// Multipliers applied to the interaction and correction fields before the
/// residuals are formed. `FieldScale::default()` leaves both unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FieldScale {
    pub interaction: f64,
    pub correction: f64,
}

impl Default for FieldScale {
    fn default() -> Self {
        Self {
            interaction: 1.0,
            correction: 1.0,
        }
    }
}

/// Zero-mean Gaussian `N(0, S)` on a uniform grid over `[-L, L]` together with
/// the scalar LQ fields and Poisson right-hand sides sampled on it.
#[derive(Clone, Debug, Serialize)]
pub struct GridDensity1D {
    pub s: f64,
    pub spacing: f64,
    pub half_width: f64,
    pub z: Vec<f64>,
    pub density: Vec<f64>,
    pub field_i: Vec<f64>,
    pub field_c: Vec<f64>,
    pub h: Vec<f64>,
    pub h_hat: f64,
    pub v: Vec<f64>,
}

fn scalar(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    if m.shape() != (1, 1) {
        return Err(Error::Shape(format!(
            "{name} must be 1x1 for the grid oracle"
        )));
    }
    Ok(m[(0, 0)])
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Central difference on interior points; endpoints are left at zero.
fn central_diff(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    for k in 1..n - 1 {
        out[k] = (values[k + 1] - values[k - 1]) / (2.0 * h);
    }
    out
}

fn second_diff(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    for k in 1..n - 1 {
        out[k] = (values[k + 1] - 2.0 * values[k] + values[k - 1]) / (h * h);
    }
    out
}

impl GridDensity1D {
    pub fn new(
        obj: &Objective,
        lti: &LtiSystem,
        cost: &CostSpec,
        s: f64,
        spacing: f64,
        half_width: f64,
        scale: FieldScale,
    ) -> Result<Self> {
        obj.validate()?;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Domain(format!("S must be positive, got {s}")));
        }
        let limit = s.sqrt() / 10.0;
        if !(spacing > 0.0) || spacing > limit {
            return Err(Error::Resolution { spacing, limit });
        }
        if half_width < 8.0 * s.sqrt() {
            return Err(Error::Domain(format!(
                "half-width {half_width} is below 8 sqrt(S) = {}",
                8.0 * s.sqrt()
            )));
        }
        let a = scalar(&lti.a, "A")?;
        let c = scalar(cost.c_matrix()?, "C")?;
        let b = scalar(&lti.b, "B")?;
        let r_inv = scalar(cost.r_inv(), "R")?;
        let sigma_cov = scalar(&lti.process_cov(), "Sigma")?;
        let d_coef = b * r_inv * b;

        let steps = (2.0 * half_width / spacing).round() as usize;
        let h = 2.0 * half_width / steps as f64;
        let z: Vec<f64> = (0..=steps).map(|k| -half_width + k as f64 * h).collect();
        let norm = (2.0 * std::f64::consts::PI * s).sqrt();
        let density: Vec<f64> = z.iter().map(|v| (-0.5 * v * v / s).exp() / norm).collect();

        let stats = EnsembleStats::new(DVector::zeros(1), DMatrix::from_element(1, 1, s));
        let mut field_i = Vec::with_capacity(z.len());
        let mut field_c = Vec::with_capacity(z.len());
        for &zk in &z {
            let zv = DVector::from_element(1, zk);
            field_i.push(scale.interaction * field_i_lq(&zv, &stats, obj, cost)?[0]);
            field_c.push(scale.correction * field_c_lq(&zv, &stats, obj, lti)?[0]);
        }

        let log_p: Vec<f64> = z.iter().map(|v| -0.5 * v * v / s - norm.ln()).collect();
        let hess_log_p = second_diff(&log_p, h);
        let drift: Vec<f64> = z.iter().map(|v| a * v).collect();
        let div_a = central_diff(&drift, h);
        let p_second = second_diff(&density, h);

        // Divergences of the constant matrices D / theta - Sigma vanish.
        let hval: Vec<f64> = (0..z.len())
            .map(|k| {
                let cz2 = (c * z[k]).powi(2);
                match *obj {
                    Objective::Soc => {
                        0.5 * cz2 + div_a[k] + 0.5 * (d_coef - sigma_cov) * hess_log_p[k]
                    }
                    Objective::Rsc { theta } if theta < 0.0 => {
                        -0.5 * theta * cz2 + div_a[k] - d_coef * hess_log_p[k] / (2.0 * theta)
                    }
                    Objective::Rsc { theta } => {
                        0.5 * theta * cz2
                            + div_a[k]
                            + 0.5 * (d_coef / theta - 2.0 * sigma_cov) * hess_log_p[k]
                    }
                }
            })
            .collect();
        // Endpoints carry no finite-difference information.
        let weighted: Vec<f64> = (1..z.len() - 1).map(|k| density[k] * hval[k]).collect();
        let mass = trapezoid(&density[1..z.len() - 1], h);
        let h_hat = trapezoid(&weighted, h) / mass;

        let v: Vec<f64> = p_second
            .iter()
            .map(|pp| match *obj {
                Objective::Soc => 0.5 * sigma_cov * pp,
                Objective::Rsc { theta } if theta > 0.0 => sigma_cov * pp,
                Objective::Rsc { .. } => 0.0,
            })
            .collect();

        Ok(Self {
            s,
            spacing: h,
            half_width,
            z,
            density,
            field_i,
            field_c,
            h: hval,
            h_hat,
            v,
        })
    }

    /// Trapezoid integral of the density over the grid.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.density, self.spacing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoissonResidual {
    pub interaction: f64,
    pub correction: f64,
}

/// Sup-norm residuals of `-(p I)' = p (h - h_hat)` and `-(p C)' = V` on the
/// grid interior, with divergences by central differences.
pub fn poisson_residual_1d(grid: &GridDensity1D) -> PoissonResidual {
    let n = grid.z.len();
    let pi: Vec<f64> = (0..n).map(|k| grid.density[k] * grid.field_i[k]).collect();
    let pc: Vec<f64> = (0..n).map(|k| grid.density[k] * grid.field_c[k]).collect();
    let div_pi = central_diff(&pi, grid.spacing);
    let div_pc = central_diff(&pc, grid.spacing);
    let mut res_i: f64 = 0.0;
    let mut res_c: f64 = 0.0;
    for k in 1..n - 1 {
        res_i = res_i.max((-div_pi[k] - grid.density[k] * (grid.h[k] - grid.h_hat)).abs());
        res_c = res_c.max((-div_pc[k] - grid.v[k]).abs());
    }
    PoissonResidual {
        interaction: res_i,
        correction: res_c,
    }
}

/// Convenience wrapper building the grid and returning both residuals.
#[allow(clippy::too_many_arguments)]
pub fn poisson_check(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    s: f64,
    spacing: f64,
    half_width: f64,
    scale: FieldScale,
) -> Result<PoissonResidual> {
    let grid = GridDensity1D::new(obj, lti, cost, s, spacing, half_width, scale)?;
    Ok(poisson_residual_1d(&grid))
}

/// Per-coordinate sample skewness of the ensemble.
pub fn coordinate_skewness(ens: &Ensemble) -> Vec<f64> {
    let n = ens.len() as f64;
    ens.particles()
        .row_iter()
        .map(|row| {
            let mean = row.sum() / n;
            let m2 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m3 = row.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
            if m2 > 0.0 {
                m3 / m2.powf(1.5)
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub n: usize,
    /// Mean and standard deviation over seeds of `|S^N_0 - S_0|_F`.
    pub mean_error: f64,
    pub std_error: f64,
    /// Same, divided by `|S_0|_F`.
    pub mean_relative_error: f64,
    pub std_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceCurve {
    pub points: Vec<ConvergencePoint>,
}

impl ConvergenceCurve {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].mean_error < w[0].mean_error)
    }
}

/// Ensemble error at `t = 0` against the Riccati reference for each `N`,
/// over seeds `base_seed, base_seed + 1, ...`.
pub fn convergence_curve(
    inst: &LqInstance,
    ns: &[usize],
    seeds: usize,
    horizon: f64,
    dt: f64,
    base_seed: u64,
) -> Result<ConvergenceCurve> {
    if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(
            "particle counts must be non-empty and strictly increasing".into(),
        ));
    }
    if seeds == 0 {
        return Err(Error::Domain("need at least one seed".into()));
    }
    let reference = integrate_dre(&inst.obj, &inst.lti, &inst.cost, horizon, dt)?;
    let s0 = reference.s0();
    let s0_norm = s0.norm();
    let options = EnkfOptions {
        snapshots: SnapshotMode::None,
        ..Default::default()
    };
    let mut points = Vec::with_capacity(ns.len());
    for &n in ns {
        let errors: Vec<f64> = (0..seeds as u64)
            .into_par_iter()
            .map(|j| {
                let traj = run_dual_enkf(
                    &inst.lti,
                    &inst.cost,
                    &inst.obj,
                    horizon,
                    dt,
                    n,
                    base_seed + j,
                    &options,
                )?;
                Ok((&traj.initial().cov - s0).norm())
            })
            .collect::<Result<_>>()?;
        let (mean, std) = mean_std(&errors);
        points.push(ConvergencePoint {
            n,
            mean_error: mean,
            std_error: std,
            mean_relative_error: mean / s0_norm,
            std_relative_error: std / s0_norm,
        });
    }
    Ok(ConvergenceCurve { points })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_smd_model, scalar_lq, SmdParams};
    use crate::riccati::solve_are;

    #[test]
    fn stationary_scalar_is_exactly_consistent() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let sol = integrate_dre(&Objective::Soc, &lti, &cost, 2.0, 0.01).unwrap();
        assert!(dual_consistency(&sol) < 1e-14);
    }

    #[test]
    fn smd_and_rsc_consistency() {
        let (lti, cost) = make_smd_model(&SmdParams::default()).unwrap();
        let sol = integrate_dre(&Objective::Soc, &lti, &cost, 5.0, 1e-3).unwrap();
        assert!(dual_consistency(&sol) < 1e-6);
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let sol = integrate_dre(&Objective::rsc(-2.0).unwrap(), &lti, &cost, 5.0, 1e-3).unwrap();
        assert!(dual_consistency(&sol) < 1e-6);
    }

    #[test]
    fn grid_density_has_unit_mass() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let g = GridDensity1D::new(
            &Objective::Soc,
            &lti,
            &cost,
            2.0,
            1e-2,
            8.0 * 2f64.sqrt(),
            FieldScale::default(),
        )
        .unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn poisson_rows_are_satisfied() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        for obj in [
            Objective::Soc,
            Objective::rsc(0.5).unwrap(),
            Objective::rsc(-1.0).unwrap(),
        ] {
            let p = solve_are(&obj, &lti, &cost, 1e-12, 500.0).unwrap();
            let s = 1.0 / (obj.kappa() * p[(0, 0)]);
            let res = poisson_check(
                &obj,
                &lti,
                &cost,
                s,
                1e-3,
                8.0 * s.sqrt(),
                FieldScale::default(),
            )
            .unwrap();
            assert!(res.interaction < 1e-4, "{obj:?} {res:?}");
            assert!(res.correction < 1e-4, "{obj:?} {res:?}");
            let perturbed = FieldScale {
                interaction: 1.1,
                correction: 1.0,
            };
            let res = poisson_check(&obj, &lti, &cost, s, 1e-3, 8.0 * s.sqrt(), perturbed).unwrap();
            assert!(res.interaction > 1e-2, "{obj:?} {res:?}");
        }
    }

    #[test]
    fn perturbed_correction_is_detected() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let scale = FieldScale {
            interaction: 1.0,
            correction: 1.1,
        };
        let res = poisson_check(&Objective::Soc, &lti, &cost, 1.0, 1e-3, 8.0, scale).unwrap();
        assert!(res.correction > 1e-2, "{res:?}");
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let err = poisson_check(
            &Objective::Soc,
            &lti,
            &cost,
            1.0,
            0.2,
            8.0,
            FieldScale::default(),
        );
        assert!(matches!(err, Err(Error::Resolution { .. })));
    }

    #[test]
    fn single_point_curve_and_determinism() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let inst = LqInstance::new(lti, cost, Objective::Soc).unwrap();
        let a = convergence_curve(&inst, &[50], 3, 1.0, 0.01, 4).unwrap();
        let b = convergence_curve(&inst, &[50], 3, 1.0, 0.01, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 1);
        assert!(a.is_strictly_decreasing());
        assert!(convergence_curve(&inst, &[100, 50], 3, 1.0, 0.01, 4).is_err());
    }

    #[test]
    fn skewness_of_symmetric_ensemble_is_zero() {
        let p = DMatrix::from_row_slice(1, 4, &[-2.0, -1.0, 1.0, 2.0]);
        let ens = Ensemble::new(p, 0.0).unwrap();
        assert!(coordinate_skewness(&ens)[0].abs() < 1e-15);
    }
}
