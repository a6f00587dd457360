use thiserror::Error;

/// Errors raised by the model, quadrature, fitting and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid hospitalization history: {0}")]
    History(String),

    #[error("quadrature did not reach rel_tol {rel_tol:e}: log-estimates {coarse} and {fine}")]
    /// Estimates are on the log scale.
    Accuracy { coarse: f64, fine: f64, rel_tol: f64 },

    #[error("patient {index}: {source}")]
    Patient {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("covariance unavailable: {0}")]
    Covariance(String),

    #[error("degenerate Wald test: gradient quadratic form is {0}")]
    DegenerateTest(f64),

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parameter file: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be finite and > 0, got {value}")))
    }
}
