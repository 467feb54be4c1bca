//! Trend estimation, removal and forecasting for functional time series.
//!
//! A series of curves `Y_n(s)` observed on a common grid is modelled as a
//! deterministic surface `T(s, n/N)` plus a stationary functional process.
//! The surface is a tensor product of two cubic B-spline bases with one
//! roughness penalty per coordinate; the two smoothing parameters are chosen
//! by REML on marginal reductions of the data.
//!
//! Besides the estimator itself the crate ships the pieces needed to study
//! it: a functional autoregressive simulator, competitor estimators, ISE
//! metrics with a Monte Carlo runner, and an FPCA-based forecasting pipeline.

pub mod baselines;
pub mod cli_io;
pub mod error;
pub mod evaluation;
pub mod forecast_pipeline;
pub mod fts_sim;
pub(crate) mod linalg;
pub mod quadrature;
pub mod series;
pub mod smoothing;
pub mod splines;
pub mod tensor_trend;

pub use error::{Error, Result};
pub use series::GridFunctionSeries;
pub use splines::{BSplineBasis, BasisMatrices};
pub use tensor_trend::{fit_trend, ForecastStep, TrendFit};
