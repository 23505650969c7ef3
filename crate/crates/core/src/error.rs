use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violates the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or invalid configuration (grid mismatch, bad counts, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("payoff vanishes; adjoint undefined (x = {x})")]
    PayoffVanishes { x: f64 },

    #[error("explosion at step {step}")]
    Explosion { step: usize },

    #[error("degenerate likelihood at step {step}: sum of weights {sum:e}")]
    DegenerateLikelihood { step: usize, sum: f64 },

    #[error("shooting did not converge after {iterations} iterations (best residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular shooting Jacobian")]
    SingularJacobian,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the boundary-value solver (as opposed to the
    /// particle simulation or the inputs).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::SingularJacobian | Error::PayoffVanishes { .. }
        )
    }

    pub fn is_simulation_failure(&self) -> bool {
        matches!(self, Error::Explosion { .. } | Error::DegenerateLikelihood { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
