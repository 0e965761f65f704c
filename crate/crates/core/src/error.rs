use thiserror::Error;

use crate::attenuation::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Attenuation coefficients outside the admissible region of their model.
    #[error("{model}: coefficient condition violated: {condition}")]
    Constraint {
        model: &'static str,
        condition: &'static str,
    },

    /// The wave speed or frequency breaks the attenuation validity assumption.
    #[error("attenuation validity violated: {0}")]
    Validity(Violation),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration failed for {model}: no root for Q = {target} in [{lo:e}, {hi:e}]")]
    Calibration {
        model: &'static str,
        target: f64,
        lo: f64,
        hi: f64,
    },

    #[error("assembly rejected at node {node} (ix = {ix}, iz = {iz}): {violation}")]
    Assembly {
        node: usize,
        ix: usize,
        iz: usize,
        violation: Violation,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
