use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Domain(String),

    #[error("{what} is singular (condition number {condition:.3e})")]
    Singular { what: String, condition: f64 },

    #[error("Riccati integration lost positive definiteness at t = {t}")]
    IntegrationBlowup { t: f64 },

    #[error("Riccati relaxation did not converge by t_max = {t_max} (residual {residual:.3e})")]
    NonConvergence { t_max: f64, residual: f64 },

    #[error("need at least {required} particles, got {got}")]
    InsufficientParticles { got: usize, required: usize },

    #[error("ensemble diverged at step {step} (t = {t}); try a smaller dt")]
    Divergence { step: usize, t: f64 },

    #[error("ensemble statistics overflowed at t = {t}; try a smaller dt")]
    StatisticsOverflow { t: f64 },

    #[error("state diverged at t = {t} during closed-loop simulation")]
    TrajectoryDivergence { t: f64 },

    #[error(
        "exponential overflow in risk-sensitive estimate; use a smaller theta or shorter horizon"
    )]
    Overflow,

    #[error("grid too coarse: spacing {spacing} exceeds sqrt(S)/10 = {limit}")]
    Resolution { spacing: f64, limit: f64 },

    #[error("Hamiltonian oracle returned a non-finite value at query {query}")]
    Oracle { query: usize },

    #[error("LQ assumptions violated: {0}")]
    Assumption(String),
}

impl Error {
    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Domain(_)
                | Error::InsufficientParticles { .. }
                | Error::Resolution { .. }
                | Error::Assumption(_)
        )
    }
}
