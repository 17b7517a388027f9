//! E-step engines.
//!
//! The particle route runs a bootstrap filter with systematic resampling and
//! then draws joint state trajectories by backward simulation; the residual
//! moments are plain averages over those trajectories. The affine Gaussian
//! route is an exact Kalman filter plus RTS smoother.

mod particle;
mod rts;

use nalgebra::{DMatrix, DVector};

pub use particle::{
    accumulate_moments, backward_simulate, bootstrap_filter, particle_smoother, ParticleCloud,
    SmoothedTrajectories,
};
pub use rts::{kalman_loglik, rts_smooth_states, rts_smoother, RtsStates};

/// Smoothed residual moments: `psi = mean E[eta_t]`, `phi = mean E[eta_t eta_t^T]`
/// over `t = 1..N`, plus residual extrema over the smoothed support.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedMoments {
    pub psi: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub res_min: DVector<f64>,
    pub res_max: DVector<f64>,
    pub loglik_estimate: f64,
    /// Filter steps where every particle had zero weight.
    pub filter_degenerate_steps: usize,
    /// Backward steps where no particle was transition-compatible.
    pub backward_fallback_steps: usize,
}

impl SmoothedMoments {
    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    /// Hand-built moments with no extrema information (extrema set to -inf/+inf).
    pub fn from_psi_phi(psi: DVector<f64>, phi: DMatrix<f64>) -> Self {
        let d = psi.len();
        Self {
            psi,
            phi,
            res_min: DVector::from_element(d, f64::NEG_INFINITY),
            res_max: DVector::from_element(d, f64::INFINITY),
            loglik_estimate: f64::NAN,
            filter_degenerate_steps: 0,
            backward_fallback_steps: 0,
        }
    }

    /// `phi - psi psi^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.phi - &self.psi * self.psi.transpose()
    }

    /// Number of coordinates whose extrema fall outside `[lower, upper]`.
    pub fn bound_violations(&self, lower: &DVector<f64>, upper: &DVector<f64>) -> usize {
        (0..self.dim())
            .filter(|&i| self.res_min[i] < lower[i] || self.res_max[i] > upper[i])
            .count()
    }
}
