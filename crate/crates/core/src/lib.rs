//! Joint imputation and prediction for multivariate time series with a
//! Bayesian recurrent model trained by Bayes by Backprop.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which every tolerance in the tests assumes.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod train;
pub mod uncertainty;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Posterior64 = model::Posterior<f64>;
pub type Batch64 = model::Batch<f64>;
pub type MCResult64 = uncertainty::MCResult<f64>;
pub type Prior64 = variational::ScaleMixturePrior<f64>;
