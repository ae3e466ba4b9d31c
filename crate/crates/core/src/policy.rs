//! Control-law extraction from ensemble statistics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dual_enkf::{Ensemble, EnsembleStats};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{CostSpec, LtiSystem, Objective, SystemModel};
use crate::rng;

/// Time-indexed gains. `ktilde[k]` estimates the value-function curvature
/// `P_t`; `gains[k]` is the linear feedback `K_t = -R^{-1} B^T ktilde[k]` when
/// the input matrix is known.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainSchedule {
    pub times: Vec<f64>,
    pub ktilde: Vec<DMatrix<f64>>,
    pub gains: Option<Vec<DMatrix<f64>>>,
}

impl GainSchedule {
    /// Single gain held for all time.
    pub fn constant(ktilde: DMatrix<f64>) -> Self {
        Self {
            times: vec![0.0],
            ktilde: vec![ktilde],
            gains: None,
        }
    }

    /// Zero-order hold: the entry at the most recent grid time `<= t`.
    pub fn index_at(&self, t: f64) -> usize {
        match self.times.partition_point(|&s| s <= t + 1e-12) {
            0 => 0,
            k => k - 1,
        }
    }

    pub fn ktilde_at(&self, t: f64) -> &DMatrix<f64> {
        &self.ktilde[self.index_at(t)]
    }

    pub fn gain_at(&self, t: f64) -> Option<&DMatrix<f64>> {
        self.gains.as_ref().map(|g| &g[self.index_at(t)])
    }

    /// Attach `K_t = -R^{-1} B^T ktilde_t` at every grid time.
    pub fn with_known_b(mut self, lti: &LtiSystem, cost: &CostSpec) -> Result<Self> {
        let gains = self
            .ktilde
            .iter()
            .map(|k| gain_known_b(k, lti, cost))
            .collect::<Result<Vec<_>>>()?;
        self.gains = Some(gains);
        Ok(self)
    }

    /// Keep only the gain at `t = 0`, held for all time.
    pub fn stationary(&self) -> Self {
        Self {
            times: vec![0.0],
            ktilde: vec![self.ktilde[0].clone()],
            gains: self.gains.as_ref().map(|g| vec![g[0].clone()]),
        }
    }
}

/// Whitened second moment `sum X X^T / ((N - 1) kappa)` with
/// `X = S^{-1} (Y - n)`; estimates `P_t`.
pub fn ktilde(ens: &Ensemble, stats: &EnsembleStats, obj: &Objective) -> Result<DMatrix<f64>> {
    obj.validate()?;
    let n = ens.len();
    if n < 2 {
        return Err(Error::InsufficientParticles {
            got: n,
            required: 2,
        });
    }
    let s_inv = linalg::regularized_inverse(&stats.cov, "ensemble covariance")?;
    let mut centered = ens.particles().clone();
    for mut col in centered.column_iter_mut() {
        col -= &stats.mean;
    }
    let whitened = s_inv * centered;
    let out = &whitened * whitened.transpose() / ((n as f64 - 1.0) * obj.kappa());
    Ok(linalg::symmetrize(&out))
}

/// `K = -R^{-1} B^T ktilde`; the policy is `x -> K x`.
pub fn gain_known_b(
    ktilde: &DMatrix<f64>,
    lti: &LtiSystem,
    cost: &CostSpec,
) -> Result<DMatrix<f64>> {
    linalg::check_square(ktilde, lti.dim(), "ktilde")?;
    Ok(-(cost.r_inv() * lti.b.transpose() * ktilde))
}

/// Source of model drift `a(x) + b(x) alpha` for the Hamiltonian.
pub trait DriftSource: Send {
    fn drift(&mut self, x: &DVector<f64>, alpha: &DVector<f64>, t: f64) -> DVector<f64>;
}

/// Exact model evaluation (noiseless oracle).
pub struct ExactDrift {
    model: Arc<dyn SystemModel>,
}

impl ExactDrift {
    pub fn new(model: Arc<dyn SystemModel>) -> Self {
        Self { model }
    }
}

impl DriftSource for ExactDrift {
    fn drift(&mut self, x: &DVector<f64>, alpha: &DVector<f64>, _t: f64) -> DVector<f64> {
        self.model.drift(x) + self.model.input_map(x) * alpha
    }
}

/// Drift estimated from one-step Euler-Maruyama simulations,
/// `(X_{t+delta} - x) / delta`, averaged over `samples` runs.
///
/// With `common_random_numbers`, every query replays the same noise paths, so
/// differences between queries are not polluted by independent noise.
pub struct SimulatedDrift {
    model: Arc<dyn SystemModel>,
    delta: f64,
    samples: usize,
    seed: u64,
    common_random_numbers: bool,
    queries: u64,
}

impl SimulatedDrift {
    pub fn new(
        model: Arc<dyn SystemModel>,
        delta: f64,
        samples: usize,
        seed: u64,
        common_random_numbers: bool,
    ) -> Result<Self> {
        if !(delta > 0.0) || samples == 0 {
            return Err(Error::Domain(
                "simulated drift needs delta > 0 and at least one sample".into(),
            ));
        }
        Ok(Self {
            model,
            delta,
            samples,
            seed,
            common_random_numbers,
            queries: 0,
        })
    }
}

impl DriftSource for SimulatedDrift {
    fn drift(&mut self, x: &DVector<f64>, alpha: &DVector<f64>, _t: f64) -> DVector<f64> {
        let stream = if self.common_random_numbers {
            0
        } else {
            self.queries
        };
        self.queries += 1;
        let mut rng: ChaCha8Rng = rng::stream(self.seed, stream);
        let mean_drift = self.model.drift(x) + self.model.input_map(x) * alpha;
        let sigma = self.model.diffusion(x);
        let sqrt_dt = self.delta.sqrt();
        let mut acc = DVector::zeros(x.len());
        for _ in 0..self.samples {
            let dw = DVector::from_fn(sigma.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let next = x + &mean_drift * self.delta + &sigma * dw * sqrt_dt;
            acc += (next - x) / self.delta;
        }
        acc / self.samples as f64
    }
}

type Query = Box<dyn FnMut(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send>;

/// Black-box Hamiltonian `H(x, alpha, t)` with a query counter.
pub struct HamiltonianOracle {
    query: Query,
    query_count: usize,
    samples: usize,
}

impl HamiltonianOracle {
    pub fn new<F>(query: F, samples: usize) -> Self
    where
        F: FnMut(&DVector<f64>, &DVector<f64>, f64) -> f64 + Send + 'static,
    {
        Self {
            query: Box::new(query),
            query_count: 0,
            samples,
        }
    }

    /// `H(x, alpha, t) = |c(x)|^2 / 2 + alpha^T R alpha / 2 + x^T ktilde_t f(x, alpha)`
    /// with `f` supplied by `drift`.
    pub fn from_model<D>(
        mut drift: D,
        schedule: GainSchedule,
        cost: CostSpec,
        samples: usize,
    ) -> Self
    where
        D: DriftSource + 'static,
    {
        Self::new(
            move |x, alpha, t| {
                let c = cost.c(x);
                let f = drift.drift(x, alpha, t);
                0.5 * c.norm_squared()
                    + 0.5 * alpha.dot(&(cost.r() * alpha))
                    + x.dot(&(schedule.ktilde_at(t) * f))
            },
            samples,
        )
    }

    pub fn evaluate(&mut self, x: &DVector<f64>, alpha: &DVector<f64>, t: f64) -> Result<f64> {
        self.query_count += 1;
        let v = (self.query)(x, alpha, t);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Oracle {
                query: self.query_count,
            })
        }
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
}

/// Minimize `H(x, ., t)` with `m + 1` queries: a baseline at `alpha = 0` and one
/// per unit direction. The linear coefficient is
/// `l_j = H(x, e_j) - H(x, 0) - R_jj / 2` and the minimizer `-R^{-1} l`.
pub fn gain_model_free(
    x: &DVector<f64>,
    oracle: &mut HamiltonianOracle,
    cost: &CostSpec,
    t: f64,
) -> Result<DVector<f64>> {
    let m = cost.r().nrows();
    let zero = DVector::zeros(m);
    let base = oracle.evaluate(x, &zero, t)?;
    let mut linear = DVector::zeros(m);
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        linear[j] = oracle.evaluate(x, &e, t)? - base - 0.5 * cost.r()[(j, j)];
    }
    Ok(-(cost.r_inv() * linear))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::scalar_lq;
    use proptest::prelude::*;

    fn line(vals: &[f64]) -> Ensemble {
        Ensemble::new(DMatrix::from_row_slice(1, vals.len(), vals), 0.0).unwrap()
    }

    fn stats(ens: &Ensemble) -> EnsembleStats {
        crate::dual_enkf::ensemble_stats(ens).unwrap()
    }

    #[test]
    fn ktilde_two_particles() {
        let ens = line(&[-1.0, 1.0]);
        let st = stats(&ens);
        let k = ktilde(&ens, &st, &Objective::Soc).unwrap();
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
        let k = ktilde(&ens, &st, &Objective::rsc(-2.0).unwrap()).unwrap();
        assert!((k[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn known_b_gain() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let k = gain_known_b(&DMatrix::from_element(1, 1, 1.0), &lti, &cost).unwrap();
        assert_eq!(k[(0, 0)], -1.0);
        let lti0 = LtiSystem::new(lti.a.clone(), DMatrix::zeros(1, 1), lti.sigma.clone()).unwrap();
        let k = gain_known_b(&DMatrix::from_element(1, 1, 1.0), &lti0, &cost).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    fn exact_oracle(lti: &LtiSystem, cost: &CostSpec, k: DMatrix<f64>) -> HamiltonianOracle {
        HamiltonianOracle::from_model(
            ExactDrift::new(Arc::new(lti.clone())),
            GainSchedule::constant(k),
            cost.clone(),
            1,
        )
    }

    #[test]
    fn model_free_matches_known_b_on_scalar() {
        let (lti, cost) = scalar_lq(1.0).unwrap();
        let k = DMatrix::from_element(1, 1, 1.0);
        let mut oracle = exact_oracle(&lti, &cost, k.clone());
        let x = DVector::from_element(1, 1.0);
        let u = gain_model_free(&x, &mut oracle, &cost, 0.0).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-14);
        assert_eq!(oracle.query_count(), 2);
        let u0 = gain_model_free(&DVector::zeros(1), &mut oracle, &cost, 0.0).unwrap();
        assert_eq!(u0[0], 0.0);
    }

    #[test]
    fn two_inputs_take_three_queries() {
        let lti = LtiSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let cost = CostSpec::quadratic(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let mut oracle = exact_oracle(&lti, &cost, DMatrix::identity(2, 2));
        gain_model_free(&DVector::from_vec(vec![1.0, 2.0]), &mut oracle, &cost, 0.0).unwrap();
        assert_eq!(oracle.query_count(), 3);
    }

    #[test]
    fn non_finite_oracle_is_an_error() {
        let (_, cost) = scalar_lq(1.0).unwrap();
        let mut oracle = HamiltonianOracle::new(|_, _, _| f64::NAN, 1);
        let err = gain_model_free(&DVector::from_element(1, 1.0), &mut oracle, &cost, 0.0);
        assert!(matches!(err, Err(Error::Oracle { query: 1 })));
    }

    #[test]
    fn zero_order_hold_lookup() {
        let sched = GainSchedule {
            times: vec![0.0, 0.5, 1.0],
            ktilde: vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 2.0),
                DMatrix::from_element(1, 1, 3.0),
            ],
            gains: None,
        };
        assert_eq!(sched.index_at(0.0), 0);
        assert_eq!(sched.index_at(0.49), 0);
        assert_eq!(sched.index_at(0.5), 1);
        assert_eq!(sched.index_at(7.0), 2);
        assert_eq!(sched.index_at(-1.0), 0);
    }

    proptest! {
        #[test]
        fn model_free_equals_known_b(
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 6),
            l in proptest::collection::vec(-1.0f64..1.0, 9),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let lti = LtiSystem::new(
                DMatrix::from_row_slice(3, 3, &a),
                DMatrix::from_row_slice(3, 2, &b),
                DMatrix::identity(3, 3) * 0.3,
            ).unwrap();
            let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
            let cost = CostSpec::quadratic(DMatrix::identity(3, 3), DMatrix::identity(3, 3), r).unwrap();
            let lm = DMatrix::from_row_slice(3, 3, &l);
            let k = &lm * lm.transpose() + DMatrix::identity(3, 3) * 0.1;
            let x = DVector::from_vec(x);
            let mut oracle = exact_oracle(&lti, &cost, k.clone());
            let u = gain_model_free(&x, &mut oracle, &cost, 0.3).unwrap();
            let expected = gain_known_b(&k, &lti, &cost).unwrap() * &x;
            prop_assert!((u - &expected).amax() <= 1e-9 * (1.0 + expected.amax()));
        }

        #[test]
        fn ktilde_is_symmetric_psd_and_permutation_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 20),
        ) {
            let m = DMatrix::from_column_slice(2, 10, &vals);
            let ens = Ensemble::new(m.clone(), 0.0).unwrap();
            let st = stats(&ens);
            prop_assume!(st.cov.determinant() > 1e-3);
            let k = ktilde(&ens, &st, &Objective::Soc).unwrap();
            prop_assert_eq!(k.clone(), k.transpose());
            prop_assert!(linalg::min_eigenvalue(&k) >= -1e-10);

            let mut perm = m.clone();
            for i in 0..10 {
                perm.set_column(i, &m.column(9 - i));
            }
            let pens = Ensemble::new(perm, 0.0).unwrap();
            let kp = ktilde(&pens, &stats(&pens), &Objective::Soc).unwrap();
            prop_assert!((k - kp).amax() < 1e-9);
        }

        #[test]
        fn linear_policy_is_homogeneous(lambda in -5.0f64..5.0, x in -3.0f64..3.0) {
            let (lti, cost) = scalar_lq(1.0).unwrap();
            let k = gain_known_b(&DMatrix::from_element(1, 1, 1.3), &lti, &cost).unwrap();
            let xv = DVector::from_element(1, x);
            let lhs = &k * (&xv * lambda);
            let rhs = (&k * &xv) * lambda;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
