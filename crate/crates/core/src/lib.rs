//! Confidence intervals for A/B-test metrics computed from user-level logs.
//!
//! Three interval constructions share one vocabulary ([`model`]):
//!
//! * closed-form asymptotic variances ([`clt`]) on user-grouped data,
//! * empirical quantiles of a one-pass Poisson bootstrap ([`bootstrap`]),
//! * the bootstrap standard deviation plugged into a normal interval.
//!
//! [`harness`] runs blank A/B tests to measure the coverage each method
//! actually achieves.

pub mod aggregate;
pub mod bootstrap;
pub mod cli;
pub mod clt;
pub mod harness;
pub mod keyed;
pub mod model;

pub use aggregate::{ingest, summarize, MomentSummary, ObservationLine, UserAggregate};
pub use bootstrap::{mixed_ci, quantile_ci, run_online_bootstrap, BootstrapDistribution};
pub use clt::{asymptotic_variance, clt_ci, inv_normal_cdf, CiReport, Method};
pub use model::{evaluate_metric, nonzero, DesignParams, Flag, Group, MeanVector, MetricKind};
