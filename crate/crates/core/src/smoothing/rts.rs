use nalgebra::{DMatrix, DVector};

use super::SmoothedMoments;
use crate::error::{Error, Result};
use crate::ssm::{AffineSpec, Dataset, StateSpaceModel};
use crate::truncnorm::NoiseParams;

/// Smoothed state distribution of an affine Gaussian model.
#[derive(Debug, Clone)]
pub struct RtsStates {
    /// `E[x_t | y_{1:N}]` for `t = 1..N+1`.
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov[x_{t+1}, x_t | y_{1:N}]` for `t = 1..N`.
    pub cross: Vec<DMatrix<f64>>,
    /// Exact `log p(y_{1:N})`.
    pub loglik: f64,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotPositiveDefinite(what.into()))
}

fn check_gaussian(model: &StateSpaceModel, noise: &NoiseParams) -> Result<AffineSpec> {
    let spec = model.affine().cloned().ok_or(Error::NotAffine)?;
    if noise.dim() != model.noise_dim() {
        return Err(Error::dim("noise", model.noise_dim(), noise.dim()));
    }
    if let Some(coord) = (0..noise.dim())
        .find(|&i| noise.lower()[i].is_finite() || noise.upper()[i].is_finite())
    {
        return Err(Error::FiniteBounds { coord });
    }
    Ok(spec)
}

/// Kalman filter and RTS smoother for an affine model with untruncated noise.
///
/// Cross-covariance between state and output noise is handled by
/// decorrelating the state equation with the current output. The initial
/// state is known, so the filter starts from a zero covariance.
pub fn rts_smooth_states(model: &StateSpaceModel, noise: &NoiseParams, data: &Dataset) -> Result<RtsStates> {
    let spec = check_gaussian(model, noise)?;
    data.check_model(model)?;
    let (n, p) = (model.n(), model.p());
    let horizon = data.len();
    let sigma = noise.sigma();
    let q = sigma.view((0, 0), (n, n)).clone_owned();
    let s = sigma.view((0, n), (n, p)).clone_owned();
    let r = sigma.view((n, n), (p, p)).clone_owned();
    let mu_w = noise.mu().rows(0, n).clone_owned();
    let mu_v = noise.mu().rows(n, p).clone_owned();
    let r_inv = inverse_spd(&r, "output noise covariance")?;
    let gain_s = &s * &r_inv;
    let a_t = &spec.a - &gain_s * &spec.c;
    let mut q_t = &q - &gain_s * s.transpose();
    symmetrize(&mut q_t);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    let mut pred_m = Vec::with_capacity(horizon + 1);
    let mut pred_p = Vec::with_capacity(horizon + 1);
    let mut filt_m = Vec::with_capacity(horizon);
    let mut filt_p = Vec::with_capacity(horizon);
    pred_m.push(data.x1.clone());
    pred_p.push(DMatrix::zeros(n, n));
    let mut loglik = 0.0;
    let eye = DMatrix::<f64>::identity(n, n);

    for k in 0..horizon {
        let (u, y) = (&data.inputs[k], &data.outputs[k]);
        let (xm, pm) = (&pred_m[k], &pred_p[k]);
        let y_free = y - &spec.d * u - &mu_v;
        let e = &y_free - &spec.c * xm;
        let mut sv = &spec.c * pm * spec.c.transpose() + &r;
        symmetrize(&mut sv);
        let chol = sv
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
        let sv_inv_e = chol.solve(&e);
        let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        loglik += -0.5 * (e.dot(&sv_inv_e) + ln_det + p as f64 * ln2pi);

        let gain = pm * spec.c.transpose() * chol.inverse();
        let xf = xm + &gain * &e;
        let ikc = &eye - &gain * &spec.c;
        let mut pf = &ikc * pm * ikc.transpose() + &gain * &r * gain.transpose();
        symmetrize(&mut pf);

        let xn = &a_t * &xf + &spec.b * u + &mu_w + &gain_s * &y_free;
        let mut pn = &a_t * &pf * a_t.transpose() + &q_t;
        symmetrize(&mut pn);
        filt_m.push(xf);
        filt_p.push(pf);
        pred_m.push(xn);
        pred_p.push(pn);
    }

    let mut means = vec![DVector::zeros(n); horizon + 1];
    let mut covs = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut cross = vec![DMatrix::zeros(n, n); horizon];
    means[horizon] = pred_m[horizon].clone();
    covs[horizon] = pred_p[horizon].clone();
    for k in (0..horizon).rev() {
        let pn = &pred_p[k + 1];
        let pn_inv = match pn.clone().cholesky() {
            Some(c) => c.inverse(),
            None => pn
                .clone()
                .pseudo_inverse(1e-14 * (1.0 + pn.norm()))
                .map_err(|e| Error::NotPositiveDefinite(e.to_string()))?,
        };
        let j = &filt_p[k] * a_t.transpose() * pn_inv;
        means[k] = &filt_m[k] + &j * (&means[k + 1] - &pred_m[k + 1]);
        let mut pk = &filt_p[k] + &j * (&covs[k + 1] - pn) * j.transpose();
        symmetrize(&mut pk);
        covs[k] = pk;
        cross[k] = &covs[k + 1] * j.transpose();
    }
    Ok(RtsStates { means, covs, cross, loglik })
}

/// Exact residual moments of an affine model with untruncated noise.
pub fn rts_smoother(model: &StateSpaceModel, noise: &NoiseParams, data: &Dataset) -> Result<SmoothedMoments> {
    let st = rts_smooth_states(model, noise, data)?;
    let spec = model.affine().expect("checked affine");
    let (n, p) = (model.n(), model.p());
    let d = n + p;
    let horizon = data.len();
    let mut psi = DVector::zeros(d);
    let mut phi = DMatrix::zeros(d, d);
    for k in 0..horizon {
        let u = &data.inputs[k];
        let (x, xn) = (&st.means[k], &st.means[k + 1]);
        let (pt, pn, cr) = (&st.covs[k], &st.covs[k + 1], &st.cross[k]);
        let mut mean = DVector::zeros(d);
        mean.rows_mut(0, n).copy_from(&(xn - &spec.a * x - &spec.b * u));
        mean.rows_mut(n, p).copy_from(&(&data.outputs[k] - &spec.c * x - &spec.d * u));
        let at = spec.a.transpose();
        let ct = spec.c.transpose();
        let c11 = pn - cr * &at - &spec.a * cr.transpose() + &spec.a * pt * &at;
        let c12 = &spec.a * pt * &ct - cr * &ct;
        let c22 = &spec.c * pt * &ct;
        let mut cov = DMatrix::zeros(d, d);
        cov.view_mut((0, 0), (n, n)).copy_from(&c11);
        cov.view_mut((0, n), (n, p)).copy_from(&c12);
        cov.view_mut((n, 0), (p, n)).copy_from(&c12.transpose());
        cov.view_mut((n, n), (p, p)).copy_from(&c22);
        psi += &mean;
        phi += cov;
        phi.ger(1.0, &mean, &mean, 1.0);
    }
    psi /= horizon as f64;
    phi /= horizon as f64;
    symmetrize(&mut phi);
    Ok(SmoothedMoments {
        psi,
        phi,
        res_min: DVector::from_element(d, f64::NEG_INFINITY),
        res_max: DVector::from_element(d, f64::INFINITY),
        loglik_estimate: st.loglik,
        filter_degenerate_steps: 0,
        backward_fallback_steps: 0,
    })
}

/// Exact Gaussian log-likelihood `log p(y_{1:N})` of an affine model.
pub fn kalman_loglik(model: &StateSpaceModel, noise: &NoiseParams, data: &Dataset) -> Result<f64> {
    rts_smooth_states(model, noise, data).map(|s| s.loglik)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{gaussian_inputs, simulate};

    fn gauss(mu: [f64; 2], s: [f64; 4]) -> NoiseParams {
        NoiseParams::gaussian(DVector::from_row_slice(&mu), DMatrix::from_row_slice(2, 2, &s)).unwrap()
    }

    /// Dense joint Gaussian of `(x_2..x_{N+1}, y_1..y_N)` built directly.
    fn joint(model: &StateSpaceModel, noise: &NoiseParams, data: &Dataset) -> (DVector<f64>, DMatrix<f64>) {
        let spec = model.affine().unwrap();
        let (a, b, c, d) = (spec.a[(0, 0)], spec.b[(0, 0)], spec.c[(0, 0)], spec.d[(0, 0)]);
        let nn = data.len();
        // noise vector e = (w_1, v_1, ..., w_N, v_N); z = (x_2..x_{N+1}, y_1..y_N) = m + L e
        let mut m = DVector::zeros(2 * nn);
        let mut l = DMatrix::zeros(2 * nn, 2 * nn);
        let mut xm = data.x1[0];
        let mut xl = DVector::<f64>::zeros(2 * nn);
        for k in 0..nn {
            let u = data.inputs[k][0];
            // y_k
            m[nn + k] = c * xm + d * u + noise.mu()[1];
            let mut row = &xl * c;
            row[2 * k + 1] += 1.0;
            l.row_mut(nn + k).copy_from(&row.transpose());
            // x_{k+1}
            xm = a * xm + b * u + noise.mu()[0];
            xl *= a;
            xl[2 * k] += 1.0;
            m[k] = xm;
            l.row_mut(k).copy_from(&xl.transpose());
        }
        let mut e_cov = DMatrix::zeros(2 * nn, 2 * nn);
        for k in 0..nn {
            e_cov.view_mut((2 * k, 2 * k), (2, 2)).copy_from(noise.sigma());
        }
        (m, &l * e_cov * l.transpose())
    }

    #[test]
    fn matches_dense_gaussian_conditioning() {
        let model = StateSpaceModel::paper_sec6();
        let noise = gauss([-0.2, 0.1], [1.0, 0.3, 0.3, 0.6]);
        let data = simulate(&model, &noise, &gaussian_inputs(1, 5, 1), &DVector::from_element(1, 0.4), 2).unwrap();
        let nn = data.len();
        let (m, s) = joint(&model, &noise, &data);
        let y = DVector::from_fn(nn, |k, _| data.outputs[k][0]);
        let sxx = s.view((0, 0), (nn, nn)).clone_owned();
        let sxy = s.view((0, nn), (nn, nn)).clone_owned();
        let syy = s.view((nn, nn), (nn, nn)).clone_owned();
        let syy_inv = syy.clone().cholesky().unwrap().inverse();
        let mean = m.rows(0, nn) + &sxy * &syy_inv * (&y - m.rows(nn, nn));
        let cov = &sxx - &sxy * &syy_inv * sxy.transpose();
        let st = rts_smooth_states(&model, &noise, &data).unwrap();
        for k in 0..nn {
            assert!((st.means[k + 1][0] - mean[k]).abs() < 1e-9);
            assert!((st.covs[k + 1][(0, 0)] - cov[(k, k)]).abs() < 1e-9);
            if k + 1 < nn {
                assert!((st.cross[k + 1][(0, 0)] - cov[(k + 1, k)]).abs() < 1e-9);
            }
        }
        let ey = y - m.rows(nn, nn);
        let chol = syy.clone().cholesky().unwrap();
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ll = -0.5 * (ey.dot(&chol.solve(&ey)) + ln_det + nn as f64 * (2.0 * std::f64::consts::PI).ln());
        assert!((st.loglik - ll).abs() < 1e-9);
    }

    #[test]
    fn zero_process_noise_residuals() {
        // With deterministic states the state residual moments vanish and the
        // output residual is the observed one.
        let model = StateSpaceModel::paper_sec6();
        let sim_noise = NoiseParams::diagonal(&[0.0, 0.0], &[1.0, 0.5], &[-1e-12, f64::NEG_INFINITY], &[1e-12, f64::INFINITY]).unwrap();
        let data = simulate(&model, &sim_noise, &gaussian_inputs(1, 20, 3), &DVector::zeros(1), 4).unwrap();
        let noise = NoiseParams::diagonal(&[0.0, 0.0], &[1e-10, 0.5], &[f64::NEG_INFINITY; 2], &[f64::INFINITY; 2]).unwrap();
        let mom = rts_smoother(&model, &noise, &data).unwrap();
        let states = data.true_states.as_ref().unwrap();
        let mut v2 = 0.0;
        for k in 0..data.len() {
            let v = data.outputs[k][0] - 1.6 * states[k][0] - 1.2 * data.inputs[k][0];
            v2 += v * v;
        }
        v2 /= data.len() as f64;
        assert!(mom.psi[0].abs() < 1e-6);
        assert!(mom.phi[(0, 0)].abs() < 1e-6);
        assert!((mom.phi[(1, 1)] - v2).abs() < 1e-5);
    }

    #[test]
    fn refuses_finite_bounds_and_nonaffine() {
        let model = StateSpaceModel::paper_sec6();
        let data = Dataset::new(gaussian_inputs(1, 3, 0), vec![DVector::zeros(1); 3], DVector::zeros(1)).unwrap();
        let bounded = NoiseParams::diagonal(&[0.0, 0.0], &[1.0, 1.0], &[-1.0, f64::NEG_INFINITY], &[1.0, f64::INFINITY]).unwrap();
        assert!(matches!(rts_smoother(&model, &bounded, &data), Err(Error::FiniteBounds { coord: 0 })));
        let nl = StateSpaceModel::new(1, 1, 1, |_, x, _| x.map(f64::sin), |_, x, _| x.clone());
        let g = gauss([0.0, 0.0], [1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(rts_smoother(&nl, &g, &data), Err(Error::NotAffine)));
    }
}
