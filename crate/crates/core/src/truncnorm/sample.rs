use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::moments::uni_moments;
use super::params::NoiseParams;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::special::{norm_cdf, norm_quantile};

/// Box mass above which plain rejection from the untruncated normal is used.
const REJECTION_MIN_MASS: f64 = 0.25;
/// Acceptance floor for joint rejection on correlated components.
const MIN_ACCEPTANCE: f64 = 1e-4;
/// Proposals observed before the acceptance monitor may fire.
const MONITOR_WARMUP: u64 = 10_000;
/// Standardized distance past which the quantile route loses precision and the
/// exponential-proposal tail sampler takes over.
const FAR_TAIL: f64 = 8.0;

#[derive(Debug, Clone)]
enum UniKind {
    /// Draw from N(0,1) until inside `[lo, hi]`.
    Rejection,
    /// Uniform proposal on a short interval straddling 0.
    Uniform,
    /// Inverse CDF on an interval in the lower half-line (after reflection).
    Quantile { p_lo: f64, p_hi: f64 },
    /// Interval far out in the tail: `x in [alpha, beta]` with `alpha >= FAR_TAIL`,
    /// returned as `-x` (lower half-line).
    Tail { alpha: f64, beta: f64, lambda: f64 },
}

/// Sampler for a univariate truncated normal with precomputed setup.
#[derive(Debug, Clone)]
pub struct UniSampler {
    mu: f64,
    sd: f64,
    a: f64,
    b: f64,
    // Standardized interval the kind operates on; for Quantile/Tail this is
    // the reflected interval when `reflect` is set.
    lo: f64,
    hi: f64,
    reflect: bool,
    kind: UniKind,
}

impl UniSampler {
    pub fn new(mu: f64, sigma2: f64, a: f64, b: f64) -> Result<Self> {
        let mass = uni_moments(mu, sigma2, a, b)?.mass;
        let sd = sigma2.sqrt();
        let za = (a - mu) / sd;
        let zb = (b - mu) / sd;
        let base = |lo, hi, reflect, kind| UniSampler {
            mu,
            sd,
            a,
            b,
            lo,
            hi,
            reflect,
            kind,
        };
        if mass >= REJECTION_MIN_MASS {
            return Ok(base(za, zb, false, UniKind::Rejection));
        }
        if za < 0.0 && zb > 0.0 {
            return Ok(base(za, zb, false, UniKind::Uniform));
        }
        // Move the interval onto the lower half-line where the CDF has
        // relative precision.
        let (lo, hi, reflect) = if za >= 0.0 { (-zb, -za, true) } else { (za, zb, false) };
        if hi > -FAR_TAIL {
            let kind = UniKind::Quantile {
                p_lo: norm_cdf(lo),
                p_hi: norm_cdf(hi),
            };
            return Ok(base(lo, hi, reflect, kind));
        }
        let alpha = -hi;
        let beta = -lo;
        let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        Ok(base(lo, hi, reflect, UniKind::Tail { alpha, beta, lambda }))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z = match self.kind {
            UniKind::Rejection => loop {
                let z: f64 = rng.sample(StandardNormal);
                if self.lo <= z && z <= self.hi {
                    break z;
                }
            },
            UniKind::Uniform => loop {
                let z = self.lo + (self.hi - self.lo) * rng.random::<f64>();
                if rng.random::<f64>() <= (-0.5 * z * z).exp() {
                    break z;
                }
            },
            UniKind::Quantile { p_lo, p_hi } => {
                let p = p_lo + (p_hi - p_lo) * rng.random::<f64>();
                norm_quantile(p.max(f64::MIN_POSITIVE)).clamp(self.lo, self.hi)
            }
            UniKind::Tail { alpha, beta, lambda } => {
                let x = if (beta - alpha) * alpha < 1.0 {
                    // Short interval: uniform proposal, ratio exp(-(x^2 - alpha^2)/2).
                    loop {
                        let x = alpha + (beta - alpha) * rng.random::<f64>();
                        if rng.random::<f64>() <= (-0.5 * (x - alpha) * (x + alpha)).exp() {
                            break x;
                        }
                    }
                } else {
                    loop {
                        let e = -(1.0 - rng.random::<f64>()).ln() / lambda;
                        let x = alpha + e;
                        if x <= beta && rng.random::<f64>() <= (-0.5 * (x - lambda).powi(2)).exp() {
                            break x;
                        }
                    }
                };
                -x
            }
        };
        let z = if self.reflect { -z } else { z };
        (self.mu + self.sd * z).clamp(self.a, self.b)
    }
}

#[derive(Debug, Clone)]
enum Part {
    Uni(usize, UniSampler),
    /// Correlated component sampled jointly by rejection.
    Joint {
        idx: Vec<usize>,
        mu: DVector<f64>,
        chol: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
}

/// Sampler for `TN(mu, Sigma, a, b)`.
///
/// Coordinates that are independent of everything else are drawn with
/// [`UniSampler`], which is exact for any box mass. Correlated components are
/// drawn by rejection from their untruncated Gaussian; if the running
/// acceptance rate falls below `1e-4` the draw fails rather than bias the
/// result.
#[derive(Debug, Clone)]
pub struct BoxSampler {
    dim: usize,
    parts: Vec<Part>,
}

impl BoxSampler {
    pub fn new(p: &NoiseParams) -> Result<Self> {
        let mut parts = Vec::new();
        for comp in p.components() {
            if let [i] = comp[..] {
                parts.push(Part::Uni(
                    i,
                    UniSampler::new(p.mu()[i], p.sigma()[(i, i)], p.lower()[i], p.upper()[i])?,
                ));
            } else {
                let sub = p.select(&comp);
                let chol = sub
                    .sigma()
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("component covariance".into()))?
                    .l();
                parts.push(Part::Joint {
                    idx: comp,
                    mu: sub.mu().clone(),
                    chol,
                    lower: sub.lower().clone(),
                    upper: sub.upper().clone(),
                });
            }
        }
        Ok(Self { dim: p.dim(), parts })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let mut out = vec![DVector::zeros(self.dim); count];
        for part in &self.parts {
            match part {
                Part::Uni(i, s) => {
                    for x in out.iter_mut() {
                        x[*i] = s.draw(rng);
                    }
                }
                Part::Joint {
                    idx,
                    mu,
                    chol,
                    lower,
                    upper,
                } => {
                    let k = idx.len();
                    let mut z = DVector::zeros(k);
                    let (mut proposed, mut accepted) = (0u64, 0u64);
                    for x in out.iter_mut() {
                        loop {
                            for v in z.iter_mut() {
                                *v = rng.sample(StandardNormal);
                            }
                            let cand = mu + chol * &z;
                            proposed += 1;
                            let inside = (0..k).all(|r| lower[r] <= cand[r] && cand[r] <= upper[r]);
                            if inside {
                                accepted += 1;
                                for (r, &i) in idx.iter().enumerate() {
                                    x[i] = cand[r];
                                }
                                break;
                            }
                            if proposed >= MONITOR_WARMUP
                                && (accepted as f64) < MIN_ACCEPTANCE * proposed as f64
                            {
                                return Err(Error::SamplerDegeneracy {
                                    acceptance: accepted as f64 / proposed as f64,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `count` draws from `TN(mu, Sigma, a, b)`, deterministic in `seed`.
pub fn sample(p: &NoiseParams, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    sample_with(p, count, &mut rng_from_seed(seed))
}

pub fn sample_with<R: Rng + ?Sized>(
    p: &NoiseParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    BoxSampler::new(p)?.draw_many(count, rng)
}
