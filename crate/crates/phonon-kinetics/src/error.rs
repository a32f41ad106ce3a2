use thiserror::Error;

/// Errors raised by the kinetic library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mechanically unstable dispersion: {0}")]
    Stability(String),
    #[error("grid or model mismatch: {0}")]
    Mismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("positivity failure: {0}")]
    Positivity(String),
    #[error("blow-up: {0}")]
    BlowUp(String),
    #[error("ergodicity gate refused: {0}")]
    Ergodicity(String),
    #[error("CFL condition violated: {0}")]
    Cfl(String),
    #[error("iteration did not converge: {0}")]
    NotConverged(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("triple cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of a numerical run (as opposed to bad input).
    pub fn is_numerical_abort(&self) -> bool {
        matches!(
            self,
            Error::Positivity(_) | Error::BlowUp(_) | Error::NotConverged(_) | Error::Linalg(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
