//! Identification of truncated-Gaussian process and measurement noise in
//! discrete-time state-space models.
//!
//! The estimator is an EM iteration: particle smoothing (bootstrap filter plus
//! backward simulation) supplies the smoothed residual moments, and the
//! M-step solves truncated-Gaussian moment-matching equations by fixed-point
//! iteration. An exact Kalman/RTS path provides the untruncated baseline.

pub mod em;
pub mod error;
pub mod harness;
pub mod rng;
pub mod smoothing;
pub mod special;
pub mod ssm;
pub mod truncnorm;

pub use error::{Error, Result};
