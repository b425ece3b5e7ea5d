use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes or invalid values while assembling the model.
    #[error("model construction: {0}")]
    Model(String),

    /// An evaluation was requested outside the domain of a demand function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A precondition of an optimization routine does not hold.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// An iteration hit its cap or was stopped as divergent.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for an iteration that stopped short, possibly behind a step label.
    pub fn is_not_converged(&self) -> bool {
        match self {
            Error::NotConverged { .. } => true,
            Error::Step { source, .. } => source.is_not_converged(),
            _ => false,
        }
    }

    pub(crate) fn in_step(self, step: &'static str) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }
}
