//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! kind of failure so callers (in particular the CLI) can map them onto
//! distinct exit paths without string-matching messages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is malformed independent of any physics (empty grid,
    /// non-monotone times, unknown enum tag, mismatched lengths).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inputs are individually well-formed but violate a documented
    /// precondition of the operation (e.g. pulse times outside [0, t],
    /// grid extends past Nyquist, f0*t below the asymptotic threshold).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An iterative numeric scheme failed to reach its tolerance.
    #[error("numeric failure in {context}: achieved {achieved:.3e}, required {required:.3e}")]
    NumericFailure {
        context: String,
        achieved: f64,
        required: f64,
    },

    /// Too few usable points to perform an estimate (e.g. fewer than three
    /// positive coherence samples for a decay fit).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Degenerate sample set for a statistical estimator (e.g. all scan
    /// samples identical, so the envelope likelihood is uninformative).
    #[error("insufficient variation: {0}")]
    InsufficientVariation(String),

    /// Measurements that cannot be reconciled with the model they are being
    /// combined under (e.g. a sideband rate difference negative beyond its
    /// uncertainty).
    #[error("inconsistent measurement: {0}")]
    InconsistentMeasurement(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
