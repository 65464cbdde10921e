//! Shared error type for the detection library.

/// Errors surfaced by numerics, training, detectors, and the pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input too small or empty for the requested operation.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A linear system could not be factorized; `pivot` is the index of the
    /// first non-positive Cholesky pivot.
    #[error("ill-conditioned system (pivot {pivot})")]
    IllConditioned { pivot: usize },

    /// A forward pass or loss evaluation produced NaN or infinity.
    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The false-alarm calibration algebra has no solution for the request.
    #[error("calibration infeasible: {0}")]
    Calibration(String),

    /// A metric is undefined for the given inputs (e.g. single-class truth).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// End-to-end pipeline failure not covered by a more specific variant.
    #[error("pipeline error: {0}")]
    Pipeline(String),
}

pub type Result<T> = std::result::Result<T, Error>;
