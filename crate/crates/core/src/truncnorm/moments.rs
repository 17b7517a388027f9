use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};

use super::params::NoiseParams;
use super::sample::BoxSampler;
use super::McOptions;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::special::{erf, erfc, erfcx, gauss_kernel, GL8_NODES, GL8_WEIGHTS, INV_SQRT_2PI};
use rand_distr::{Distribution, StandardNormal};

/// Smallest box mass accepted before reporting tail degeneracy.
pub const MIN_MASS: f64 = 1e-300;

/// Width (in `(x - mu) / sqrt(2 sigma^2)` units) below which the interval
/// moments are integrated by Gauss-Legendre around the midpoint instead of
/// differencing erf values.
const NARROW_WIDTH: f64 = 0.05;

/// Beyond this standardized distance the mass is computed in the log domain.
const TAIL_START: f64 = 6.0;

/// Moments of a univariate Gaussian restricted to `[a, b]`.
///
/// `raw1`/`raw2` are the unnormalised integrals (they carry the mass factor),
/// `mean`/`second` are the moments of the truncated distribution itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniTruncMoments {
    pub mass: f64,
    pub raw1: f64,
    pub raw2: f64,
    pub mean: f64,
    pub second: f64,
}

impl UniTruncMoments {
    pub fn variance(&self) -> f64 {
        (self.second - self.mean * self.mean).max(0.0)
    }

    fn from_normalized(mass: f64, mean: f64, var: f64, a: f64, b: f64) -> Self {
        let mean = mean.clamp(a, b);
        let second = var.max(0.0) + mean * mean;
        Self {
            mass,
            raw1: mass * mean,
            raw2: mass * second,
            mean,
            second,
        }
    }
}

pub fn uni_moments(mu: f64, sigma2: f64, a: f64, b: f64) -> Result<UniTruncMoments> {
    if !mu.is_finite() || !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "need finite mu and positive variance, got ({mu}, {sigma2})"
        )));
    }
    if a.is_nan() || b.is_nan() || a >= b || a == f64::INFINITY || b == f64::NEG_INFINITY {
        return Err(Error::InvalidParams(format!("invalid interval [{a}, {b}]")));
    }
    let sd = sigma2.sqrt();
    let scale = sd * SQRT_2;
    let abar = (a - mu) / scale;
    let bbar = (b - mu) / scale;

    if abar.is_finite() && bbar.is_finite() && bbar - abar < NARROW_WIDTH {
        return narrow(mu, sd, abar, bbar, a, b);
    }
    if abar > TAIL_START {
        return upper_tail(mu, sd, abar, bbar, a, b);
    }
    if bbar < -TAIL_START {
        let m = upper_tail(-mu, sd, -bbar, -abar, -b, -a)?;
        return Ok(UniTruncMoments {
            raw1: -m.raw1,
            mean: -m.mean,
            ..m
        });
    }

    let mass = if abar >= 0.0 {
        0.5 * (erfc(abar) - erfc(bbar))
    } else if bbar <= 0.0 {
        0.5 * (erfc(-bbar) - erfc(-abar))
    } else {
        0.5 * (erf(bbar) - erf(abar))
    };
    if !(mass >= MIN_MASS) {
        return Err(Error::TailDegeneracy { mass });
    }
    let ea = gauss_kernel(abar);
    let eb = gauss_kernel(bbar);
    let raw1 = mu * mass - sd * (eb - ea) * INV_SQRT_2PI;
    let ta = if a.is_finite() { (mu + a) * ea } else { 0.0 };
    let tb = if b.is_finite() { (mu + b) * eb } else { 0.0 };
    let raw2 = (mu * mu + sigma2) * mass - sd * (tb - ta) * INV_SQRT_2PI;

    let mean = (raw1 / mass).clamp(a, b);
    let second = (raw2 / mass).max(mean * mean);
    Ok(UniTruncMoments {
        mass,
        raw1,
        raw2,
        mean,
        second,
    })
}

/// Interval entirely above `mu + 6 sqrt(2) sd`. Works with `erfcx` so that
/// neither the mass nor the Mills ratios underflow.
fn upper_tail(mu: f64, sd: f64, abar: f64, bbar: f64, a: f64, b: f64) -> Result<UniTruncMoments> {
    let ea = erfcx(abar);
    // r = erfc(bbar) / erfc(abar), kept as a log.
    let (ln_r, decay) = if bbar.is_finite() {
        let decay = (abar - bbar) * (abar + bbar);
        (decay + erfcx(bbar).ln() - ea.ln(), decay.exp())
    } else {
        (f64::NEG_INFINITY, 0.0)
    };
    let one_minus_r = -ln_r.exp_m1();
    let ln_mass = 0.5_f64.ln() - abar * abar + ea.ln() + one_minus_r.ln();
    let mass = ln_mass.exp();
    if !(mass >= MIN_MASS) {
        return Err(Error::TailDegeneracy { mass });
    }
    let alpha = abar * SQRT_2;
    let lam_a = (2.0 / PI).sqrt() / (ea * one_minus_r);
    let lam_b = lam_a * decay;
    let beta_term = if bbar.is_finite() { bbar * SQRT_2 * lam_b } else { 0.0 };
    let mean = mu + sd * (lam_a - lam_b);
    let var = sd * sd * (1.0 + alpha * lam_a - beta_term - (lam_a - lam_b).powi(2));
    Ok(UniTruncMoments::from_normalized(mass, mean, var, a, b))
}

/// Narrow interval: Gauss-Legendre around the midpoint `c` with the factor
/// `exp(-c^2)` pulled out, giving full relative precision for the mass and
/// the central moments.
fn narrow(mu: f64, sd: f64, abar: f64, bbar: f64, a: f64, b: f64) -> Result<UniTruncMoments> {
    let c = 0.5 * (abar + bbar);
    let h = 0.5 * (bbar - abar);
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (x, w) in GL8_NODES.iter().zip(GL8_WEIGHTS.iter()) {
        let off = h * x;
        let u = c + off;
        let f = w * (-(u - c) * (u + c)).exp();
        s0 += f;
        s1 += f * off;
        s2 += f * off * off;
    }
    let ln_mass = -c * c + (h * s0).ln() - 0.5 * PI.ln();
    let mass = ln_mass.exp();
    if !(mass >= MIN_MASS) {
        return Err(Error::TailDegeneracy { mass });
    }
    let m1 = s1 / s0;
    let m2 = s2 / s0;
    let scale = sd * SQRT_2;
    let mean = mu + scale * (c + m1);
    let var = scale * scale * (m2 - m1 * m1);
    Ok(UniTruncMoments::from_normalized(mass, mean, var, a, b))
}

/// `E[eta]` and `E[eta eta^T]` under `TN(mu, Sigma, a, b)`.
///
/// Exact on independent singleton components; Monte Carlo (with `mc`) on
/// correlated components. Cross-component entries are products of means.
pub fn truncated_moments(p: &NoiseParams, mc: &McOptions) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = p.dim();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (ci, comp) in p.components().into_iter().enumerate() {
        if let [i] = comp[..] {
            let m = uni_moments(p.mu()[i], p.sigma()[(i, i)], p.lower()[i], p.upper()[i])?;
            mean[i] = m.mean;
            second[(i, i)] = m.second;
        } else {
            let sub = p.select(&comp);
            let opts = McOptions {
                samples: mc.samples,
                seed: derive_seed(mc.seed, ci as u64),
            };
            let est = mc_moments(&sub, &opts)?;
            for (r, &i) in comp.iter().enumerate() {
                mean[i] = est.mean[r];
                for (c, &j) in comp.iter().enumerate() {
                    second[(i, j)] = est.second[(r, c)];
                }
            }
        }
    }
    let comps = p.components();
    for (ci, ca) in comps.iter().enumerate() {
        for cb in comps.iter().skip(ci + 1) {
            for &i in ca {
                for &j in cb {
                    second[(i, j)] = mean[i] * mean[j];
                    second[(j, i)] = mean[i] * mean[j];
                }
            }
        }
    }
    Ok((mean, second))
}

pub fn truncated_mean(p: &NoiseParams, mc: &McOptions) -> Result<DVector<f64>> {
    truncated_moments(p, mc).map(|(m, _)| m)
}

pub fn truncated_second_moment(p: &NoiseParams, mc: &McOptions) -> Result<DMatrix<f64>> {
    truncated_moments(p, mc).map(|(_, s)| s)
}

/// Plain Monte Carlo moment estimate from the module's own sampler.
#[derive(Debug, Clone)]
pub struct McMoments {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
    /// Standard error of each coordinate of `mean`.
    pub mean_std_err: DVector<f64>,
    pub samples: usize,
}

pub fn mc_moments(p: &NoiseParams, mc: &McOptions) -> Result<McMoments> {
    if mc.samples < 2 {
        return Err(Error::InvalidParams("Monte Carlo needs at least 2 samples".into()));
    }
    let d = p.dim();
    let sampler = BoxSampler::new(p)?;
    let mut rng = rng_from_seed(mc.seed);
    let draws = sampler.draw_many(mc.samples, &mut rng)?;
    let n = draws.len() as f64;
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for x in &draws {
        mean += x;
        second += x * x.transpose();
    }
    mean /= n;
    second /= n;
    let var = DVector::from_fn(d, |i, _| {
        draws.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)
    });
    Ok(McMoments {
        mean_std_err: var.map(|v| (v / n).sqrt()),
        mean,
        second,
        samples: mc.samples,
    })
}

/// `ln P(a <= X <= b)` for `X ~ N(mu, Sigma)`.
pub fn log_mass(p: &NoiseParams, mc: &McOptions) -> Result<f64> {
    let mut total = 0.0;
    for (ci, comp) in p.components().into_iter().enumerate() {
        let sub = p.select(&comp);
        if sub.all_bounds_infinite() {
            continue;
        }
        if let [i] = comp[..] {
            let m = uni_moments(p.mu()[i], p.sigma()[(i, i)], p.lower()[i], p.upper()[i])?;
            total += m.mass.ln();
            continue;
        }
        let chol = sub
            .sigma()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("component covariance".into()))?;
        let l = chol.l();
        let mut rng = rng_from_seed(derive_seed(mc.seed, ci as u64));
        let k = comp.len();
        let mut inside = 0usize;
        let mut z = DVector::zeros(k);
        for _ in 0..mc.samples {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let x = sub.mu() + &l * &z;
            if sub.contains(&x) {
                inside += 1;
            }
        }
        if inside == 0 {
            return Err(Error::TailDegeneracy { mass: 0.0 });
        }
        total += (inside as f64 / mc.samples as f64).ln();
    }
    Ok(total)
}

/// Log density of `TN(mu, Sigma, a, b)` at `x`; `-inf` outside the box.
pub fn log_density(p: &NoiseParams, x: &DVector<f64>, mc: &McOptions) -> Result<f64> {
    let d = p.dim();
    if x.len() != d {
        return Err(Error::dim("density argument", d, x.len()));
    }
    if !p.contains(x) {
        return Ok(f64::NEG_INFINITY);
    }
    let chol = p
        .sigma()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("sigma".into()))?;
    let r = x - p.mu();
    let q = r.dot(&chol.solve(&r));
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ln_norm = 0.5 * (d as f64 * (2.0 * PI).ln() + ln_det);
    Ok(-0.5 * q - ln_norm - log_mass(p, mc)?)
}
