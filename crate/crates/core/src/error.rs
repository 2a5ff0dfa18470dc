use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of the operation (e.g. a point at or
    /// below the electrode plane, an empty range).
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation is not defined for the current state (wrong topology,
    /// unconverged crystal, missing second string, ...).
    #[error("state error: {0}")]
    State(String),

    /// Two ions coincide, so the Coulomb energy is singular.
    #[error("coulomb singularity between ions {0} and {1}")]
    Singularity(usize, usize),

    #[error("no convergence after {evaluations} evaluations (residual {residual:e}): {message}")]
    NoConvergence {
        evaluations: usize,
        residual: f64,
        message: String,
    },

    /// The Hessian at a stationary point has a significantly negative
    /// eigenvalue.
    #[error("stationary point is a saddle (lowest eigenvalue {min_eigenvalue:e}, largest {max_eigenvalue:e})")]
    Saddle {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::State(_) => "state",
            Error::Singularity(..) => "singularity",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Saddle { .. } => "saddle",
            Error::Config(_) => "config",
        }
    }
}
