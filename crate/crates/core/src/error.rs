use thiserror::Error;

/// Errors raised by the ttsa library.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto coarse classes: configuration, mathematical failure, blowup.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:.6e})")]
    Singular { min_eigenvalue: f64 },

    #[error("iteration did not converge after {iterations} iterations (residual {residual:.6e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("matrix is not Hurwitz (max real eigenvalue part {margin:.6e})")]
    Stability { margin: f64 },

    #[error("numerical blowup: {0}")]
    Blowup(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("accuracy requirement not met: {0}")]
    Accuracy(String),

    #[error("experiment invalid: {blown_up} of {replicates} replicates blew up")]
    ExperimentInvalid { blown_up: usize, replicates: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage annotations peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by the inputs rather than by the mathematics.
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Argument(_) | Error::Domain(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
