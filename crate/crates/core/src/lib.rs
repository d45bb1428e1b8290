//! Gaussian-mixture multiple-instance learning.
//!
//! Bags carry a binary label; instances inside each bag carry feature
//! vectors drawn from a two-component Gaussian mixture whose mixing
//! indicator is the (usually latent) instance label. The crate provides
//! three estimators for the shared parameter vector
//! `(pi, mu1, mu0, vech(Omega))`:
//!
//! * [`imle`] — closed-form estimator from fully labeled instances,
//! * [`bmle`] — EM estimator from bag labels only,
//! * [`smle`] — EM estimator combining bag labels with a posterior-guided
//!   labeled subsample designed by [`subsample`].
//!
//! Supporting modules: [`sim`] generates synthetic datasets (including
//! four mis-specified regimes), [`asymptotics`] builds the closed-form
//! precision matrix and Monte-Carlo efficiency gaps, [`metrics`] scores
//! predictions at bag and instance level, and [`study`] drives the
//! replication studies behind the `gmmil` command-line tool.

pub mod asymptotics;
pub mod bmle;
pub mod config;
pub mod error;
pub mod imle;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sim;
pub mod smle;
pub mod study;
pub mod subsample;

pub use error::{Error, Result};
pub use model::{Bag, BagDataset, EstimatorKind, FitResult, Instance, InstanceLabel, ModelParams};
