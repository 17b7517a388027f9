use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("truncation box mass {mass:e} underflows (tail degeneracy)")]
    TailDegeneracy { mass: f64 },

    #[error("rejection sampler acceptance rate {acceptance:e} too low for correlated covariance")]
    SamplerDegeneracy { acceptance: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("state trajectory diverged at t={t}")]
    Divergence { t: usize },

    #[error("particle filter collapsed for {consecutive} consecutive steps (last t={t})")]
    FilterCollapse { t: usize, consecutive: usize },

    #[error("model is not affine")]
    NotAffine,

    #[error("operation requires infinite truncation bounds, coordinate {coord} is bounded")]
    FiniteBounds { coord: usize },

    #[error("residual spread is degenerate in coordinate {coord}")]
    DegenerateSpread { coord: usize },

    #[error("{failed} of {runs} Monte Carlo runs failed")]
    TooManyFailures { failed: usize, runs: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    /// True for failures of the numerical machinery, as opposed to bad input
    /// or I/O problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::TailDegeneracy { .. }
                | Error::SamplerDegeneracy { .. }
                | Error::NonFinite(_)
                | Error::Divergence { .. }
                | Error::FilterCollapse { .. }
                | Error::DegenerateSpread { .. }
                | Error::TooManyFailures { .. }
        )
    }
}
