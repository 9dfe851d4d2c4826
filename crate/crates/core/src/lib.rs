//! Sparse aggregation of multiple exposures and mediators into single scores,
//! fitted by a profiled penalized objective and a two-block ADMM.

pub mod admm;
pub mod benchmark;
pub mod ellipsoid;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod profile;
pub mod simulation;
pub mod tuning;
pub mod verify;

pub use admm::{fit, SolverOptions};
pub use error::{Error, Result};
pub use model::{
    residualize_covariates, standardize_columns, validate_dataset, AggregationWeights, Dataset, FitResult, Normalization,
    PenaltyConfig, ProfiledCoefficients, StopReason,
};
