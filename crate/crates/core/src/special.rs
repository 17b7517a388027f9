//! Error-function helpers shared by the truncated-Gaussian code.
//!
//! `libm` supplies `erf`/`erfc` and `statrs` supplies `erfc_inv`; what lives here is the scaled
//! complement `erfcx` and the log-domain pieces needed when a truncation box
//! sits far out in a tail.

use std::f64::consts::{PI, SQRT_2};

pub use libm::{erf, erfc};
pub use statrs::function::erf::erfc_inv;

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `exp(x^2) * erfc(x)`, accurate for all `x >= 0` including values where
/// `erfc` itself underflows.
pub fn erfcx(x: f64) -> f64 {
    if x.is_infinite() && x > 0.0 {
        return 0.0;
    }
    if x < 6.0 {
        return (x * x).exp() * erfc(x);
    }
    // Continued fraction erfc(x) = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
    // evaluated bottom-up. Forty terms is far past convergence for x >= 6.
    let mut tail = x;
    for k in (1..=40).rev() {
        tail = x + (k as f64 / 2.0) / tail;
    }
    1.0 / (PI.sqrt() * tail)
}

/// `ln erfc(x)` without underflow for large positive `x`.
pub fn ln_erfc(x: f64) -> f64 {
    if x < 6.0 {
        erfc(x).ln()
    } else {
        erfcx(x).ln() - x * x
    }
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal quantile; `p` in (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `exp(-x^2)` with the convention that infinite arguments give exactly 0.
pub(crate) fn gauss_kernel(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-x * x).exp()
    }
}

/// Eight-point Gauss-Legendre rule on [-1, 1].
pub(crate) const GL8_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
pub(crate) const GL8_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfcx_branches_agree_near_switch() {
        let direct = (36.0_f64).exp() * erfc(6.0);
        let cf = {
            let mut tail = 6.0;
            for k in (1..=40).rev() {
                tail = 6.0 + (k as f64 / 2.0) / tail;
            }
            1.0 / (PI.sqrt() * tail)
        };
        assert!((direct - cf).abs() / direct < 1e-12, "{direct} {cf}");
    }

    #[test]
    fn erfcx_large_argument_asymptote() {
        // erfcx(x) ~ 1/(x sqrt(pi)) * (1 - 1/(2x^2) + 3/(4x^4))
        let x = 1e3;
        let asym = 1.0 / (x * PI.sqrt()) * (1.0 - 0.5 / (x * x) + 0.75 / x.powi(4));
        assert!((erfcx(x) - asym).abs() / asym < 1e-14);
    }

    #[test]
    fn ln_erfc_continuous() {
        let lo = ln_erfc(5.999_999_999);
        let hi = ln_erfc(6.0);
        assert!((lo - hi).abs() < 1e-7);
        assert!(ln_erfc(40.0).is_finite());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &z in &[-8.0, -3.0, -0.5, 0.0, 0.7, 2.5] {
            let p = norm_cdf(z);
            assert!((norm_quantile(p) - z).abs() < 1e-9, "z={z}");
        }
    }

    #[test]
    fn gl8_integrates_degree_15() {
        let s: f64 = GL8_NODES
            .iter()
            .zip(GL8_WEIGHTS.iter())
            .map(|(x, w)| w * x.powi(14))
            .sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
    }
}
