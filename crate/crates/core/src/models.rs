//! Control systems, cost structures and objectives, plus the two benchmark
//! presets (spring-mass-damper and cart-pole).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Controlled Itô SDE `dX = (a(X) + b(X) U) dt + sigma(X) dW`.
///
/// Implementations must be pure: repeated evaluation at the same state
/// returns the same values.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn diffusion(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `b` and `sigma` do not depend on the state.
    fn has_constant_maps(&self) -> bool {
        false
    }

    fn as_lti(&self) -> Option<&LtiSystem> {
        None
    }
}

/// Linear time-invariant dynamics `dX = (A X + B U) dt + sigma dW`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        if d == 0 {
            return Err(Error::Shape("A must be non-empty".into()));
        }
        linalg::check_square(&a, d, "A")?;
        if b.nrows() != d || b.ncols() == 0 {
            return Err(Error::Shape(format!(
                "B is {}x{}, expected {d}xm with m >= 1",
                b.nrows(),
                b.ncols()
            )));
        }
        if sigma.nrows() != d || sigma.ncols() == 0 {
            return Err(Error::Shape(format!(
                "sigma is {}x{}, expected {d}xd_w with d_w >= 1",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !(linalg::all_finite(&a) && linalg::all_finite(&b) && linalg::all_finite(&sigma)) {
            return Err(Error::Domain("system matrices must be finite".into()));
        }
        Ok(Self { a, b, sigma })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `Sigma = sigma sigma^T`.
    pub fn process_cov(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }
}

impl SystemModel for LtiSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn diffusion(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.sigma.clone()
    }
    fn has_constant_maps(&self) -> bool {
        true
    }
    fn as_lti(&self) -> Option<&LtiSystem> {
        Some(self)
    }
}

pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// The running-cost output map `c`.
#[derive(Clone)]
pub enum OutputMap {
    Linear(DMatrix<f64>),
    Nonlinear { dim: usize, f: VectorFn },
}

impl OutputMap {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            OutputMap::Linear(c) => c * x,
            OutputMap::Nonlinear { f, .. } => f(x),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            OutputMap::Linear(c) => c.nrows(),
            OutputMap::Nonlinear { dim, .. } => *dim,
        }
    }
}

impl fmt::Debug for OutputMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputMap::Linear(c) => f.debug_tuple("Linear").field(c).finish(),
            OutputMap::Nonlinear { dim, .. } => write!(f, "Nonlinear {{ dim: {dim} }}"),
        }
    }
}

/// Terminal cost `G(x)`. The quadratic form is `x^T G x / 2 + offset`, so the
/// terminal density `exp(-G(x))` is `N(0, G^{-1})`.
#[derive(Clone)]
pub enum TerminalCost {
    Quadratic { g: DMatrix<f64>, offset: f64 },
    General(ScalarFn),
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalCost::Quadratic { g, offset } => f
                .debug_struct("Quadratic")
                .field("g", g)
                .field("offset", offset)
                .finish(),
            TerminalCost::General(_) => write!(f, "General(..)"),
        }
    }
}

/// Running cost `(|c(x)|^2 + u^T R u) / 2` and terminal cost.
#[derive(Clone, Debug)]
pub struct CostSpec {
    output: OutputMap,
    terminal: TerminalCost,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl CostSpec {
    pub fn new(output: OutputMap, terminal: TerminalCost, r: DMatrix<f64>) -> Result<Self> {
        if !r.is_square() || r.nrows() == 0 {
            return Err(Error::Shape("R must be square and non-empty".into()));
        }
        if !linalg::is_symmetric(&r, 1e-12) {
            return Err(Error::Domain("R must be symmetric".into()));
        }
        let r_inv = linalg::spd_inverse(&r, "R")
            .map_err(|_| Error::Domain("R must be positive definite".into()))?;
        if let TerminalCost::Quadratic { g, offset } = &terminal {
            if !g.is_square() {
                return Err(Error::Shape("G must be square".into()));
            }
            if !linalg::is_symmetric(g, 1e-12) || !linalg::is_positive_definite(g) {
                return Err(Error::Domain(
                    "G must be symmetric positive definite".into(),
                ));
            }
            if !offset.is_finite() {
                return Err(Error::Domain("terminal offset must be finite".into()));
            }
        }
        Ok(Self {
            output,
            terminal,
            r,
            r_inv,
        })
    }

    /// `c(x) = C x`, `G(x) = x^T G x / 2`.
    pub fn quadratic(c: DMatrix<f64>, g: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if c.ncols() != g.nrows() {
            return Err(Error::Shape(format!(
                "C has {} columns but G is {}x{}",
                c.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
        Self::new(
            OutputMap::Linear(c),
            TerminalCost::Quadratic { g, offset: 0.0 },
            r,
        )
    }

    pub fn output(&self) -> &OutputMap {
        &self.output
    }

    pub fn terminal(&self) -> &TerminalCost {
        &self.terminal
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    pub fn c(&self, x: &DVector<f64>) -> DVector<f64> {
        self.output.eval(x)
    }

    pub fn running(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let c = self.c(x);
        0.5 * (c.norm_squared() + u.dot(&(&self.r * u)))
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        match &self.terminal {
            TerminalCost::Quadratic { g, offset } => 0.5 * x.dot(&(g * x)) + offset,
            TerminalCost::General(f) => f(x),
        }
    }

    pub fn c_matrix(&self) -> Result<&DMatrix<f64>> {
        match &self.output {
            OutputMap::Linear(c) => Ok(c),
            OutputMap::Nonlinear { .. } => Err(Error::Domain(
                "LQ routine requires a linear output map c(x) = Cx".into(),
            )),
        }
    }

    pub fn g_matrix(&self) -> Result<&DMatrix<f64>> {
        match &self.terminal {
            TerminalCost::Quadratic { g, .. } => Ok(g),
            TerminalCost::General(_) => Err(Error::Domain(
                "terminal sampling is only implemented for quadratic terminal cost".into(),
            )),
        }
    }
}

/// Stochastic optimal control or risk-sensitive control with parameter theta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Soc,
    Rsc { theta: f64 },
}

impl Objective {
    pub fn rsc(theta: f64) -> Result<Self> {
        let obj = Objective::Rsc { theta };
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Soc => Ok(()),
            Objective::Rsc { theta } if theta != 0.0 && theta.is_finite() => Ok(()),
            Objective::Rsc { theta } => Err(Error::Domain(format!(
                "risk-sensitive parameter must be finite and nonzero, got {theta}"
            ))),
        }
    }

    /// `theta` for RSC, zero for SOC.
    pub fn theta(&self) -> f64 {
        match *self {
            Objective::Soc => 0.0,
            Objective::Rsc { theta } => theta,
        }
    }

    /// Density scaling: 1 for SOC, `|theta|` for RSC.
    pub fn kappa(&self) -> f64 {
        match *self {
            Objective::Soc => 1.0,
            Objective::Rsc { theta } => theta.abs(),
        }
    }

    pub fn label(&self) -> &'static str {
        match *self {
            Objective::Soc => "LQG",
            Objective::Rsc { theta } if theta > 0.0 => "LEQGP",
            Objective::Rsc { .. } => "LEQGN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub controllable: bool,
    pub observable: bool,
    pub positive: bool,
    /// Smallest eigenvalue of `B R^{-1} B^T - theta sigma sigma^T`.
    pub min_eigenvalue: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.controllable && self.observable && self.positive
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let mut failed = Vec::new();
        if !self.controllable {
            failed.push("(A, B) not controllable".to_string());
        }
        if !self.observable {
            failed.push("(A, C) not observable".to_string());
        }
        if !self.positive {
            failed.push(format!(
                "B R^-1 B^T - theta sigma sigma^T not positive semi-definite (min eigenvalue {:.3e})",
                self.min_eigenvalue
            ));
        }
        Err(Error::Assumption(failed.join("; ")))
    }
}

const RANK_TOL: f64 = 1e-10;

fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(d, d * m);
    let mut block = b.clone();
    for k in 0..d {
        out.view_mut((0, k * m), (d, m)).copy_from(&block);
        block = a * block;
    }
    out
}

/// Controllability of `(A, B)`, observability of `(A, C)`, and
/// `B R^{-1} B^T - theta sigma sigma^T >= 0` (theta = 0 for SOC).
pub fn validate_lq_assumptions(
    lti: &LtiSystem,
    cost: &CostSpec,
    obj: &Objective,
) -> Result<ValidationReport> {
    obj.validate()?;
    let d = lti.dim();
    let c = cost.c_matrix()?;
    if c.ncols() != d {
        return Err(Error::Shape(format!(
            "C has {} columns, expected {d}",
            c.ncols()
        )));
    }
    let m = lti.b.ncols();
    linalg::check_square(cost.r(), m, "R")?;
    if let Ok(g) = cost.g_matrix() {
        linalg::check_square(g, d, "G")?;
    }

    let ctrb = controllability_matrix(&lti.a, &lti.b);
    let obsv = controllability_matrix(&lti.a.transpose(), &c.transpose());
    let coupling = &lti.b * cost.r_inv() * lti.b.transpose() - lti.process_cov() * obj.theta();
    let min_eig = linalg::min_eigenvalue(&coupling);
    Ok(ValidationReport {
        controllable: linalg::rank(&ctrb, RANK_TOL) == d,
        observable: linalg::rank(&obsv, RANK_TOL) == d,
        positive: min_eig >= -1e-10 * (1.0 + coupling.amax()),
        min_eigenvalue: min_eig,
    })
}

/// A linear-quadratic problem: LTI model, quadratic cost and an objective.
#[derive(Clone, Debug)]
pub struct LqInstance {
    pub lti: LtiSystem,
    pub cost: CostSpec,
    pub obj: Objective,
}

impl LqInstance {
    pub fn new(lti: LtiSystem, cost: CostSpec, obj: Objective) -> Result<Self> {
        validate_lq_assumptions(&lti, &cost, &obj)?.into_result()?;
        cost.g_matrix()?;
        Ok(Self { lti, cost, obj })
    }

    pub fn with_objective(&self, obj: Objective) -> Result<Self> {
        Self::new(self.lti.clone(), self.cost.clone(), obj)
    }

    pub fn dim(&self) -> usize {
        self.lti.dim()
    }
}

/// Scalar instance `A = 0, B = C = R = G = 1` with process noise `sigma`.
pub fn scalar_lq(sigma: f64) -> Result<(LtiSystem, CostSpec)> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let lti = LtiSystem::new(
        DMatrix::zeros(1, 1),
        one.clone(),
        DMatrix::from_element(1, 1, sigma),
    )?;
    let cost = CostSpec::quadratic(one.clone(), one.clone(), one)?;
    Ok((lti, cost))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmdParams {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    /// Standard deviation of the white-noise force acting on the mass.
    pub force_noise: f64,
}

impl Default for SmdParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            stiffness: 1.0,
            damping: 0.5,
            force_noise: 0.5,
        }
    }
}

/// Spring-mass-damper with state (position, velocity) and a force input.
///
/// Cost: `C = I`, `R = 1`, `G = I`. Process noise enters through the force
/// channel, `sigma = force_noise * B`.
pub fn make_smd_model(params: &SmdParams) -> Result<(LtiSystem, CostSpec)> {
    let SmdParams {
        mass,
        stiffness,
        damping,
        force_noise,
    } = *params;
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Domain(format!("mass must be positive, got {mass}")));
    }
    for (name, v) in [
        ("stiffness", stiffness),
        ("damping", damping),
        ("force_noise", force_noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -stiffness / mass, -damping / mass]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / mass]);
    let sigma = &b * force_noise;
    let lti = LtiSystem::new(a, b, sigma)?;
    let cost = CostSpec::quadratic(
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1),
    )?;
    Ok((lti, cost))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    pub gravity: f64,
    /// Standard deviation of the white-noise force on the cart.
    pub force_noise: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            force_noise: 0.2,
        }
    }
}

/// Cart-pole in error coordinates `e = (x, x_dot, phi - pi, phi_dot)`, where
/// `phi` is measured from the downward vertical. The upright target is `e = 0`.
///
/// The pole is a point mass on a massless rod; the force acts on the cart.
/// Process noise is a random force on the cart evaluated with the input map
/// at the upright equilibrium, so `sigma` is constant.
#[derive(Clone, Debug)]
pub struct CartPole {
    params: CartPoleParams,
    sigma: DMatrix<f64>,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Result<Self> {
        for (name, v) in [
            ("cart_mass", params.cart_mass),
            ("pole_mass", params.pole_mass),
            ("length", params.length),
            ("gravity", params.gravity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(params.force_noise >= 0.0 && params.force_noise.is_finite()) {
            return Err(Error::Domain("force_noise must be non-negative".into()));
        }
        let mut model = Self {
            params,
            sigma: DMatrix::zeros(4, 1),
        };
        model.sigma = model.input_map(&DVector::zeros(4)) * model.params.force_noise;
        Ok(model)
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    /// Pole angle from the downward vertical.
    pub fn angle(e: &DVector<f64>) -> f64 {
        e[2] + PI
    }

    /// Physical state `(x, x_dot, phi, phi_dot)` to error coordinates.
    pub fn to_error(physical: &DVector<f64>) -> DVector<f64> {
        let mut e = physical.clone();
        e[2] -= PI;
        e
    }

    fn denom(&self, phi: f64) -> f64 {
        let s = phi.sin();
        self.params.cart_mass + self.params.pole_mass * s * s
    }
}

impl SystemModel for CartPole {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, e: &DVector<f64>) -> DVector<f64> {
        let CartPoleParams {
            cart_mass,
            pole_mass,
            length,
            gravity,
            ..
        } = self.params;
        let phi = Self::angle(e);
        let (s, c) = phi.sin_cos();
        let w = e[3];
        let den = self.denom(phi);
        let x_acc = pole_mass * s * (length * w * w + gravity * c) / den;
        let phi_acc = -(pole_mass * length * w * w * s * c + (cart_mass + pole_mass) * gravity * s)
            / (length * den);
        DVector::from_vec(vec![e[1], x_acc, w, phi_acc])
    }

    fn input_map(&self, e: &DVector<f64>) -> DMatrix<f64> {
        let phi = Self::angle(e);
        let den = self.denom(phi);
        DMatrix::from_column_slice(
            4,
            1,
            &[0.0, 1.0 / den, 0.0, -phi.cos() / (self.params.length * den)],
        )
    }

    fn diffusion(&self, _e: &DVector<f64>) -> DMatrix<f64> {
        self.sigma.clone()
    }
}

/// Cart-pole model with cost `C = I`, `R = 1`, `G = I` in error coordinates.
pub fn make_pendulum_model(params: &CartPoleParams) -> Result<(CartPole, CostSpec)> {
    let model = CartPole::new(params.clone())?;
    let cost = CostSpec::quadratic(
        DMatrix::identity(4, 4),
        DMatrix::identity(4, 4),
        DMatrix::identity(1, 1),
    )?;
    Ok((model, cost))
}
