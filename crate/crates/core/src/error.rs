use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments or shapes: the caller can fix these.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("kernel is singular at x = y")]
    Singularity,

    #[error("panel endpoint singularity at local coordinate {0}")]
    EndpointSingularity(f64),

    #[error("singular local least-squares system at point {0}")]
    SingularStencil(usize),

    #[error("geometry sampling failed after {attempts} attempts: {reason}")]
    RetryBudget { attempts: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singularity
                | Error::EndpointSingularity(_)
                | Error::SingularStencil(_)
                | Error::Numerical(_)
                | Error::RetryBudget { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
