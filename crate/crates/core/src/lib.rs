//! Gaussian-mixture mean estimation when the fitted variance differs from the
//! true one.
//!
//! The crate covers the equal-weight isotropic mixture, the family of
//! mismatched population objectives and their minimizers, finite-sample EM and
//! Lloyd, Bayes clustering error and its bounds, closed forms for the symmetric
//! two-component model, and the sweep harness used by the `mismix` binary.

pub mod assignment;
pub mod clustering;
pub mod estimators;
pub mod experiments;
pub mod k2;
pub mod error;
pub mod model;
pub mod population;
pub mod quadrature;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
pub use model::{
    geometry, normalized_mse, perm_distance, sample_gmm, GeometrySummary, LabeledSample, MeanConfig,
    MixtureModel, Observations,
};
pub use experiments::{Experiment, SweepGrid, SweepSpec};
pub use population::FitSpec;
