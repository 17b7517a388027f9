//! Truncated multivariate Gaussian `TN(mu, Sigma, a, b)`: a Gaussian restricted
//! to the box `a <= x <= b` and renormalised.
//!
//! Univariate moments are closed form (erf/exp expressions derived from the
//! moment generating function), with narrow-interval and far-tail regimes
//! handled separately. Multivariate moments factor over the independent
//! components of `Sigma`; singleton components use the closed forms and any
//! correlated component falls back to Monte Carlo integration.

mod moments;
mod params;
mod sample;

pub use moments::{
    log_density, log_mass, mc_moments, truncated_mean, truncated_moments,
    truncated_second_moment, uni_moments, McMoments, UniTruncMoments,
};
pub use params::{fmt_ext, parse_ext, ExtReal, NoiseParams};
pub use sample::{sample, sample_with, BoxSampler, UniSampler};

/// Sample budget and seed for the Monte Carlo moment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McOptions {
    pub samples: usize,
    pub seed: u64,
}

impl McOptions {
    pub const DEFAULT_SAMPLES: usize = 100_000;

    pub fn with_seed(seed: u64) -> Self {
        Self {
            samples: Self::DEFAULT_SAMPLES,
            seed,
        }
    }
}
