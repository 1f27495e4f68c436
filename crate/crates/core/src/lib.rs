//! Benchmark engine comparing a distributed Newton-Raphson logistic regression
//! protocol (GLORE) with four weighted-averaging SGD protocols (FedAvg, FedAvgM,
//! q-FedAvg, FedProx).
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: logistic-regression likelihood, gradient, Hessian, the pooled
//!   Newton solver and the local SGD epoch shared by the first-order protocols.
//! - [`protocols`]: the five server-side aggregation rules and confidence intervals.
//! - [`harness`]: metered transport, RNG stream plan and repeated-run driver.
//! - [`datagen`]: synthetic multi-site data with mean, SD and effect-size shifts.
//! - [`ingest`]: CSV cohorts in and out.
//! - [`metrics`]: AUC/ROC, relative bias, coverage, communication summaries.

pub mod datagen;
pub mod error;
pub mod harness;
pub mod ingest;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod protocols;

pub use error::{FedError, Result};
pub use model::{Coefficients, Dataset, SgdConfig};
pub use protocols::{Client, FitResult, ProtocolConfig, ProtocolKind};
