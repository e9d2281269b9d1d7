//! Shared low-rank covariance models for multi-subject functional
//! connectivity, and linear brain-age regression on the inferred network
//! activities.
//!
//! The pipeline has two stages. A loading matrix `W` (regions × networks) is
//! fit jointly across a training cohort under one of five constraint regimes
//! ([`models::Regime`]); each subject gets its own network activities and
//! noise level. The activities then serve as features for an ordinary least
//! squares age model, evaluated by bootstrapped mean absolute error over
//! random sub-cohorts.

pub mod activity;
pub mod agereg;
pub mod assignment;
pub mod cli;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
