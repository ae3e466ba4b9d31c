//! Differential and algebraic Riccati equations for the value-function
//! curvature `P_t` and its dual `S_t`, integrated backward with fixed-step RK4.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::models::{CostSpec, LtiSystem, Objective};

/// Backward Riccati solution on an increasing time grid.
#[derive(Clone, Debug, Serialize)]
pub struct RiccatiSolution {
    pub objective: Objective,
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub g: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p[0]
    }

    pub fn s0(&self) -> &DMatrix<f64> {
        &self.s[0]
    }
}

/// Precomputed matrices shared by both Riccati right-hand sides.
struct Coefficients {
    a: DMatrix<f64>,
    ctc: DMatrix<f64>,
    /// `B R^{-1} B^T - theta Sigma`.
    coupling: DMatrix<f64>,
    sigma_cov: DMatrix<f64>,
    kappa: f64,
}

impl Coefficients {
    fn new(obj: &Objective, lti: &LtiSystem, cost: &CostSpec) -> Result<Self> {
        obj.validate()?;
        let d = lti.dim();
        let c = cost.c_matrix()?;
        if c.ncols() != d {
            return Err(Error::Shape(format!(
                "C has {} columns, expected {d}",
                c.ncols()
            )));
        }
        linalg::check_square(cost.r(), lti.b.ncols(), "R")?;
        let sigma_cov = lti.process_cov();
        let coupling = &lti.b * cost.r_inv() * lti.b.transpose() - &sigma_cov * obj.theta();
        Ok(Self {
            a: lti.a.clone(),
            ctc: c.transpose() * c,
            coupling,
            sigma_cov,
            kappa: obj.kappa(),
        })
    }

    fn dre(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let out = self.a.transpose() * p + p * &self.a + &self.ctc - p * &self.coupling * p;
        symmetrize(&out)
    }

    fn dual(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.kappa;
        let out = &self.a * s + s * self.a.transpose() - &self.coupling / k + s * &self.ctc * s * k;
        symmetrize(&out)
    }
}

fn check_sym_input(m: &DMatrix<f64>, d: usize, name: &str) -> Result<()> {
    linalg::check_square(m, d, name)
}

/// DRE right-hand side: `A^T P + P A + C^T C - P (B R^{-1} B^T - theta Sigma) P`
/// with theta = 0 for SOC.
pub fn dre_rhs(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_sym_input(p, lti.dim(), "P")?;
    Ok(Coefficients::new(obj, lti, cost)?.dre(p))
}

/// Dual DRE right-hand side:
/// `A S + S A^T - (B R^{-1} B^T - theta Sigma) / kappa + kappa S C^T C S`.
///
/// `S_t = (kappa P_t)^{-1}` satisfies `dS/dt = dual_dre_rhs(S)`.
pub fn dual_dre_rhs(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_sym_input(s, lti.dim(), "S")?;
    Ok(Coefficients::new(obj, lti, cost)?.dual(s))
}

/// `P^{-1}` for SOC, `(|theta| P)^{-1}` for RSC.
pub fn s_from_p(obj: &Objective, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    obj.validate()?;
    linalg::spd_inverse(&(p * obj.kappa()), "P")
}

/// Inverse of [`s_from_p`].
pub fn p_from_s(obj: &Objective, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    obj.validate()?;
    Ok(linalg::spd_inverse(s, "S")? / obj.kappa())
}

/// Uniform grid on `[0, T]`; the step is adjusted so `T` is hit exactly.
pub fn time_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let steps = (horizon / dt).round().max(1.0) as usize;
    let h = horizon / steps as f64;
    Ok((0..=steps)
        .map(|k| if k == steps { horizon } else { k as f64 * h })
        .collect())
}

fn rk4<F>(f: &F, y: &DMatrix<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (0.5 * h)));
    let k3 = f(&(y + &k2 * (0.5 * h)));
    let k4 = f(&(y + &k3 * h));
    symmetrize(&(y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)))
}

/// Backward RK4 integration of `-dP/dt = D(P)`, `P_T = G`, and of the offset
/// `-dg/dt = tr(Sigma P) / 2`, `g_T = 0`. `S_t` comes from an independent
/// integration of the dual equation.
pub fn integrate_dre(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    horizon: f64,
    dt: f64,
) -> Result<RiccatiSolution> {
    let coef = Coefficients::new(obj, lti, cost)?;
    let g_term = cost.g_matrix()?;
    linalg::check_square(g_term, lti.dim(), "G")?;
    let times = time_grid(horizon, dt)?;
    let n = times.len();

    // Augmented state: P in the top-left block, g in the bottom-right entry.
    let d = lti.dim();
    let rhs = |y: &DMatrix<f64>| {
        let p = y.view((0, 0), (d, d)).into_owned();
        let mut out = DMatrix::zeros(d + 1, d + 1);
        out.view_mut((0, 0), (d, d)).copy_from(&coef.dre(&p));
        out[(d, d)] = 0.5 * (&coef.sigma_cov * &p).trace();
        out
    };

    let mut p = vec![DMatrix::zeros(d, d); n];
    let mut g = vec![0.0; n];
    let mut y = DMatrix::zeros(d + 1, d + 1);
    y.view_mut((0, 0), (d, d)).copy_from(g_term);
    p[n - 1] = g_term.clone();
    for k in (0..n - 1).rev() {
        let h = times[k + 1] - times[k];
        y = rk4(&rhs, &y, h);
        let pk = y.view((0, 0), (d, d)).into_owned();
        if !linalg::all_finite(&pk) || !linalg::is_positive_definite(&pk) {
            return Err(Error::IntegrationBlowup { t: times[k] });
        }
        p[k] = pk;
        g[k] = y[(d, d)];
    }
    let (_, s) = integrate_dual_dre(obj, lti, cost, horizon, dt)?;
    Ok(RiccatiSolution {
        objective: *obj,
        times,
        p,
        g,
        s,
    })
}

/// Independent backward integration of the dual DRE from `S_T = s_from_p(G)`.
///
/// Returns `S_t` on the same grid as [`integrate_dre`].
pub fn integrate_dual_dre(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    horizon: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let coef = Coefficients::new(obj, lti, cost)?;
    let times = time_grid(horizon, dt)?;
    let n = times.len();
    let s_terminal = s_from_p(obj, cost.g_matrix()?)?;
    // In reversed time tau = T - t: dS/dtau = -D_dual(S).
    let rhs = |s: &DMatrix<f64>| -coef.dual(s);
    let mut out = vec![s_terminal.clone(); n];
    let mut s = s_terminal;
    for k in (0..n - 1).rev() {
        s = rk4(&rhs, &s, times[k + 1] - times[k]);
        if !linalg::all_finite(&s) || !linalg::is_positive_definite(&s) {
            return Err(Error::IntegrationBlowup { t: times[k] });
        }
        out[k] = s.clone();
    }
    Ok((times, out))
}

/// Stationary solution of the DRE obtained by relaxing backward from `P = I`
/// until `|D(P)|_F < tol`.
pub fn solve_are(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    tol: f64,
    t_max: f64,
) -> Result<DMatrix<f64>> {
    let coef = Coefficients::new(obj, lti, cost)?;
    if !(tol > 0.0) || !(t_max > 0.0) {
        return Err(Error::Domain("tol and t_max must be positive".into()));
    }
    let d = lti.dim();
    let scale = 1.0 + coef.a.norm() + coef.coupling.norm() + coef.ctc.norm();
    let h = (0.1 / scale).min(0.05);
    let rhs = |p: &DMatrix<f64>| coef.dre(p);
    let mut p = DMatrix::identity(d, d);
    let mut t = 0.0;
    let mut residual = coef.dre(&p).norm();
    while residual >= tol {
        if t >= t_max {
            return Err(Error::NonConvergence { t_max, residual });
        }
        p = rk4(&rhs, &p, h);
        t += h;
        if !linalg::all_finite(&p) || !linalg::is_positive_definite(&p) {
            return Err(Error::IntegrationBlowup { t });
        }
        residual = coef.dre(&p).norm();
    }
    Ok(p)
}

/// Frobenius residual `|D(P)|_F` at a candidate stationary point.
pub fn are_residual(
    obj: &Objective,
    lti: &LtiSystem,
    cost: &CostSpec,
    p: &DMatrix<f64>,
) -> Result<f64> {
    Ok(dre_rhs(obj, lti, cost, p)?.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::scalar_lq;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn dre_scalar_values() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let soc = Objective::Soc;
        assert!(dre_rhs(&soc, &lti, &cost, &s(1.0)).unwrap()[(0, 0)].abs() < 1e-15);
        assert_eq!(dre_rhs(&soc, &lti, &cost, &s(0.0)).unwrap(), s(1.0));
        let rsc = Objective::rsc(0.5).unwrap();
        let v = dre_rhs(&rsc, &lti, &cost, &s(2f64.sqrt())).unwrap()[(0, 0)];
        assert!(v.abs() < 1e-14, "{v}");
    }

    #[test]
    fn dual_dre_scalar_values() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let soc = Objective::Soc;
        assert!(dual_dre_rhs(&soc, &lti, &cost, &s(1.0)).unwrap()[(0, 0)].abs() < 1e-15);
        assert_eq!(dual_dre_rhs(&soc, &lti, &cost, &s(0.0)).unwrap(), s(-1.0));
        let rsc = Objective::rsc(0.5).unwrap();
        let v = dual_dre_rhs(&rsc, &lti, &cost, &s(2f64.sqrt())).unwrap()[(0, 0)];
        assert!(v.abs() < 1e-14, "{v}");
    }

    #[test]
    fn rhs_rejects_wrong_shape() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        assert!(matches!(
            dre_rhs(&Objective::Soc, &lti, &cost, &DMatrix::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_noise_gives_zero_offset() {
        let (lti, cost) = scalar_lq(0.0).unwrap();
        let sol = integrate_dre(&Objective::Soc, &lti, &cost, 2.0, 0.01).unwrap();
        assert!(sol.g.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stationary_terminal_condition_is_preserved() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let sol = integrate_dre(&Objective::Soc, &lti, &cost, 3.0, 0.01).unwrap();
        assert_eq!(sol.g[sol.len() - 1], 0.0);
        for p in &sol.p {
            assert!((p[(0, 0)] - 1.0).abs() < 1e-14);
        }
        // g_t = tr(Sigma P) (T - t) / 2 with P = 1.
        assert!((sol.g[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_dre_relaxes_to_are() {
        // G = 2: P_t = tanh-type solution converging to 1.
        let (lti, _) = scalar_lq(1.0).unwrap();
        let cost = CostSpec::quadratic(s(1.0), s(2.0), s(1.0)).unwrap();
        let sol = integrate_dre(&Objective::Soc, &lti, &cost, 10.0, 0.01).unwrap();
        assert!((sol.p0()[(0, 0)] - 1.0).abs() < 1e-6);
        // Closed form: P_t = coth(T - t + atanh(1/2))... check at tau = 1.
        let tau: f64 = 1.0;
        let exact = 1.0 / (tau + (0.5f64).atanh()).tanh();
        let k = sol
            .times
            .iter()
            .position(|&t| (t - 9.0).abs() < 1e-9)
            .unwrap();
        assert!((sol.p[k][(0, 0)] - exact).abs() < 1e-9);
    }

    #[test]
    fn are_scalar_solutions() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let p = solve_are(&Objective::Soc, &lti, &cost, 1e-10, 200.0).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-8);
        let p = solve_are(&Objective::rsc(0.5).unwrap(), &lti, &cost, 1e-10, 200.0).unwrap();
        assert!((p[(0, 0)] - 2f64.sqrt()).abs() < 1e-8);
        let small = solve_are(&Objective::rsc(1e-3).unwrap(), &lti, &cost, 1e-10, 200.0).unwrap();
        assert!((small[(0, 0)] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn are_reports_non_convergence() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let err = solve_are(&Objective::rsc(0.5).unwrap(), &lti, &cost, 1e-14, 1e-3);
        assert!(matches!(err, Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn s_from_p_variants() {
        let p = DMatrix::identity(2, 2) * 2.0;
        let out = s_from_p(&Objective::Soc, &p).unwrap();
        assert!((out - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        let out = s_from_p(&Objective::rsc(-2.0).unwrap(), &DMatrix::identity(2, 2)).unwrap();
        assert!((out - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        assert_eq!(
            s_from_p(&Objective::Soc, &DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2)
        );
        assert!(matches!(
            s_from_p(&Objective::Soc, &DMatrix::zeros(2, 2)),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn blowup_is_reported_with_time() {
        // theta far beyond the positivity bound: P escapes in finite time.
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let obj = Objective::rsc(5.0).unwrap();
        match integrate_dre(&obj, &lti, &cost, 20.0, 0.01) {
            Err(Error::IntegrationBlowup { t }) => assert!(t > 0.0 && t < 20.0),
            other => panic!("expected blowup, got {other:?}"),
        }
    }
}
