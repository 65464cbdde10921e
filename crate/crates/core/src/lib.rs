//! Retrospective anomaly detection for high-dimensional process data.
//!
//! The pipeline learns a pruned latent representation of a historical
//! sample with an ARD variational autoencoder, flags provisional outliers
//! with an ensemble of latent-space detectors and a changepoint filter,
//! re-estimates the in-control baseline on the retained observations, and
//! emits final out-of-control labels through a 2-of-4 consensus over
//! changepoint, ensemble, Hotelling T², and reconstruction-error
//! indicators.

pub mod ardvae;
pub mod changepoint;
pub mod detectors;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod simgen;

pub use error::{Error, Result};
pub use numerics::{DataMatrix, RngStream};
