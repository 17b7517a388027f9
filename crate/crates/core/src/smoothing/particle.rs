use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::SmoothedMoments;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::ssm::{settle, Dataset, StateSpaceModel};
use crate::truncnorm::{log_mass, BoxSampler, McOptions, NoiseParams};

/// Consecutive collapsed filter steps tolerated before aborting.
const MAX_CONSECUTIVE_COLLAPSE: usize = 3;
/// Rejection proposals per backward draw before computing the full weights.
const BACKWARD_REJECTION_TRIES: usize = 32;
const DIVERGENCE_LIMIT: f64 = 1e12;

/// Filter output for times `1..=N+1`.
///
/// `particles[k]` and `weights[k]` describe time `t = k + 1`. For `k < N` the
/// weights are the filtering weights after conditioning on `y_t` (before any
/// resampling); the last cloud is the one-step prediction of `x_{N+1}`.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub particles: Vec<DMatrix<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// `ancestors[k][i]`: parent in cloud `k` of particle `i` of cloud `k + 1`.
    pub ancestors: Vec<Vec<usize>>,
    pub loglik_increments: Vec<f64>,
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
    pub degenerate: Vec<bool>,
    pub loglik: f64,
}

impl ParticleCloud {
    pub fn num_particles(&self) -> usize {
        self.particles[0].ncols()
    }

    /// Number of data records `N`.
    pub fn horizon(&self) -> usize {
        self.particles.len() - 1
    }
}

/// Pre-computed pieces of one noise block.
struct BlockDensity {
    mu: DVector<f64>,
    prec: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BlockDensity {
    fn new(p: &NoiseParams) -> Result<Self> {
        let prec = p
            .sigma()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("noise block".into()))?
            .inverse();
        Ok(Self {
            mu: p.mu().clone(),
            prec,
            lower: p.lower().clone(),
            upper: p.upper().clone(),
        })
    }

    /// Unnormalised log density `-(r - mu)' P (r - mu) / 2`, or `-inf` off the box.
    fn log_kernel(&self, r: &[f64]) -> f64 {
        let k = r.len();
        for i in 0..k {
            if r[i] < self.lower[i] || r[i] > self.upper[i] {
                return f64::NEG_INFINITY;
            }
        }
        let mut q = 0.0;
        for i in 0..k {
            let di = r[i] - self.mu[i];
            for j in 0..k {
                q += di * self.prec[(i, j)] * (r[j] - self.mu[j]);
            }
        }
        -0.5 * q
    }
}

fn split_noise(model: &StateSpaceModel, noise: &NoiseParams) -> Result<(NoiseParams, NoiseParams)> {
    let (n, p) = (model.n(), model.p());
    if noise.dim() != n + p {
        return Err(Error::dim("noise", n + p, noise.dim()));
    }
    if !noise.is_block_separable(0..n) {
        return Err(Error::InvalidParams(
            "particle filter needs uncorrelated state and output noise blocks".into(),
        ));
    }
    let w: Vec<usize> = (0..n).collect();
    let v: Vec<usize> = (n..n + p).collect();
    Ok((noise.select(&w), noise.select(&v)))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let m = weights.len();
    let step = 1.0 / m as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(m);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..m {
        while u > cum && i + 1 < m {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

/// Index drawn from unnormalised cumulative weights.
fn draw_index<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("non-empty");
    let u = rng.random::<f64>() * total;
    cum.partition_point(|c| *c <= u).min(cum.len() - 1)
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    w.iter()
        .scan(0.0, |s, x| {
            *s += x;
            Some(*s)
        })
        .collect()
}

/// Bootstrap particle filter with the transition as proposal.
///
/// Particles are weighted by the (unnormalised) truncated density of the
/// output residual; the normalising constant enters only the log-likelihood
/// estimate. Systematic resampling is triggered when ESS < M/2.
pub fn bootstrap_filter(
    model: &StateSpaceModel,
    noise: &NoiseParams,
    data: &Dataset,
    num_particles: usize,
    seed: u64,
) -> Result<ParticleCloud> {
    if num_particles < 2 {
        return Err(Error::InvalidParams("particle filter needs M >= 2".into()));
    }
    data.check_model(model)?;
    let (w_block, v_block) = split_noise(model, noise)?;
    let (n, p, m) = (model.n(), model.p(), num_particles);
    let horizon = data.len();

    let w_sampler = BoxSampler::new(&w_block)?;
    let v_density = BlockDensity::new(&v_block)?;
    let v_chol = v_block.sigma().clone().cholesky().expect("checked PD");
    let v_ln_norm = 0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln())
        + v_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
        + log_mass(&v_block, &McOptions::with_seed(derive_seed(seed, 1)))?;

    let mut rng = rng_from_seed(seed);
    let mut particles = Vec::with_capacity(horizon + 1);
    let mut weights = Vec::with_capacity(horizon + 1);
    let mut ancestors = Vec::with_capacity(horizon);
    let mut increments = Vec::with_capacity(horizon);
    let mut ess_trace = Vec::with_capacity(horizon);
    let mut resampled = Vec::with_capacity(horizon);
    let mut degenerate = Vec::with_capacity(horizon);

    let mut cloud = DMatrix::from_fn(n, m, |i, _| data.x1[i]);
    let mut carried = vec![1.0 / m as f64; m];
    let mut consecutive = 0usize;
    let mut residual = vec![0.0; p];

    for k in 0..horizon {
        let t = k + 1;
        let (u, y) = (&data.inputs[k], &data.outputs[k]);
        let mut logw = vec![f64::NEG_INFINITY; m];
        for i in 0..m {
            let x = cloud.column(i).clone_owned();
            let g = model.output(t, &x, u)?;
            for j in 0..p {
                residual[j] = y[j] - g[j];
            }
            logw[i] = v_density.log_kernel(&residual) + carried[i].ln();
        }
        let total = log_sum_exp(logw.iter().copied());
        let w: Vec<f64> = if total == f64::NEG_INFINITY {
            consecutive += 1;
            if consecutive >= MAX_CONSECUTIVE_COLLAPSE {
                return Err(Error::FilterCollapse { t, consecutive });
            }
            degenerate.push(true);
            increments.push(f64::NEG_INFINITY);
            vec![1.0 / m as f64; m]
        } else {
            consecutive = 0;
            degenerate.push(false);
            increments.push(total - v_ln_norm);
            logw.iter().map(|l| (l - total).exp()).collect()
        };
        let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
        ess_trace.push(ess);

        let (parents, next_weights) = if ess < 0.5 * m as f64 {
            resampled.push(true);
            (systematic_resample(&w, &mut rng), vec![1.0 / m as f64; m])
        } else {
            resampled.push(false);
            ((0..m).collect(), w.clone())
        };

        let draws = w_sampler.draw_many(m, &mut rng)?;
        let mut next = DMatrix::zeros(n, m);
        for (i, &a) in parents.iter().enumerate() {
            let x = cloud.column(a).clone_owned();
            let f = model.transition(t, &x, u)?;
            for r in 0..n {
                let (s, _) = settle(f[r], draws[i][r], w_block.lower()[r], w_block.upper()[r]);
                if !(s.abs() <= DIVERGENCE_LIMIT) {
                    return Err(Error::Divergence { t: t + 1 });
                }
                next[(r, i)] = s;
            }
        }
        particles.push(std::mem::replace(&mut cloud, next));
        weights.push(w);
        ancestors.push(parents);
        carried = next_weights;
    }
    particles.push(cloud);
    weights.push(carried);

    let loglik = increments.iter().sum();
    Ok(ParticleCloud {
        particles,
        weights,
        ancestors,
        loglik_increments: increments,
        ess: ess_trace,
        resampled,
        degenerate,
        loglik,
    })
}

/// Equally weighted state trajectories `x_{1:N+1}` from backward simulation.
#[derive(Debug, Clone)]
pub struct SmoothedTrajectories {
    /// One `n x (N+1)` matrix per trajectory; column `k` is `x_{k+1}`.
    pub paths: Vec<DMatrix<f64>>,
    /// Backward steps (indexed by `t - 1`) that fell back to filter weights.
    pub fallback: Vec<bool>,
    pub loglik: f64,
    pub filter_degenerate_steps: usize,
}

impl SmoothedTrajectories {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Backward simulation through the filter clouds.
///
/// `x_{N+1}` is drawn from the final weights, then each `x_t` from the filter
/// particles at `t` reweighted by the truncated transition density of
/// `x_{t+1} - f_t(x_t, u_t)`. Each draw first tries rejection sampling with
/// the filter weights as proposal and falls back to the full weight vector.
pub fn backward_simulate(
    cloud: &ParticleCloud,
    model: &StateSpaceModel,
    noise: &NoiseParams,
    data: &Dataset,
    num_trajectories: usize,
    seed: u64,
) -> Result<SmoothedTrajectories> {
    if num_trajectories == 0 {
        return Err(Error::InvalidParams("need at least one trajectory".into()));
    }
    let horizon = cloud.horizon();
    if horizon != data.len() {
        return Err(Error::dim("particle cloud horizon", data.len(), horizon));
    }
    let (w_block, _) = split_noise(model, noise)?;
    let density = BlockDensity::new(&w_block)?;
    let (n, m, l) = (model.n(), cloud.num_particles(), num_trajectories);
    let mut rng = rng_from_seed(seed);

    // idx[k][j]: particle index of trajectory j at time k + 1.
    let mut idx = vec![vec![0usize; l]; horizon + 1];
    let final_cum = cumulative(&cloud.weights[horizon]);
    for j in 0..l {
        idx[horizon][j] = draw_index(&final_cum, &mut rng);
    }
    let mut fallback = vec![false; horizon];
    let mut r = vec![0.0; n];
    let mut logw = vec![0.0; m];

    for k in (0..horizon).rev() {
        let t = k + 1;
        let u = &data.inputs[k];
        let xs = &cloud.particles[k];
        let next_cloud = &cloud.particles[k + 1];
        let mut fx = DMatrix::zeros(n, m);
        for i in 0..m {
            let f = model.transition(t, &xs.column(i).clone_owned(), u)?;
            fx.set_column(i, &f);
        }
        let w = &cloud.weights[k];
        let cum = cumulative(w);
        for j in 0..l {
            let target = idx[k + 1][j];
            let residual_into = |i: usize, r: &mut [f64]| {
                for q in 0..n {
                    r[q] = next_cloud[(q, target)] - fx[(q, i)];
                }
            };
            let mut chosen = None;
            for _ in 0..BACKWARD_REJECTION_TRIES {
                let i = draw_index(&cum, &mut rng);
                residual_into(i, &mut r);
                let lk = density.log_kernel(&r);
                if lk > f64::NEG_INFINITY && rng.random::<f64>() <= lk.exp() {
                    chosen = Some(i);
                    break;
                }
            }
            let i = match chosen {
                Some(i) => i,
                None => {
                    for i in 0..m {
                        residual_into(i, &mut r);
                        logw[i] = w[i].ln() + density.log_kernel(&r);
                    }
                    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if top == f64::NEG_INFINITY {
                        fallback[k] = true;
                        draw_index(&cum, &mut rng)
                    } else {
                        let bw: Vec<f64> = logw.iter().map(|x| (x - top).exp()).collect();
                        draw_index(&cumulative(&bw), &mut rng)
                    }
                }
            };
            idx[k][j] = i;
        }
    }

    let paths = (0..l)
        .map(|j| DMatrix::from_fn(n, horizon + 1, |q, k| cloud.particles[k][(q, idx[k][j])]))
        .collect();
    Ok(SmoothedTrajectories {
        paths,
        fallback,
        loglik: cloud.loglik,
        filter_degenerate_steps: cloud.degenerate.iter().filter(|d| **d).count(),
    })
}

/// Equal-weight averages of the residual `xi_t - h_t(zeta_t)` and its outer
/// product over all trajectories and times, plus elementwise extrema.
pub fn accumulate_moments(
    traj: &SmoothedTrajectories,
    model: &StateSpaceModel,
    data: &Dataset,
) -> Result<SmoothedMoments> {
    let horizon = data.len();
    let d = model.noise_dim();
    if traj.is_empty() {
        return Err(Error::InvalidParams("no trajectories".into()));
    }
    if let Some(p) = traj.paths.iter().find(|p| p.ncols() != horizon + 1 || p.nrows() != model.n()) {
        return Err(Error::dim("trajectory length", horizon + 1, p.ncols()));
    }
    let mut psi = DVector::zeros(d);
    let mut phi = DMatrix::zeros(d, d);
    let mut lo = DVector::from_element(d, f64::INFINITY);
    let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
    for path in &traj.paths {
        for k in 0..horizon {
            let x = path.column(k).clone_owned();
            let xn = path.column(k + 1).clone_owned();
            let r = model.residual(k + 1, &x, &xn, &data.inputs[k], &data.outputs[k])?;
            psi += &r;
            phi.ger(1.0, &r, &r, 1.0);
            for i in 0..d {
                lo[i] = lo[i].min(r[i]);
                hi[i] = hi[i].max(r[i]);
            }
        }
    }
    let count = (horizon * traj.len()) as f64;
    psi /= count;
    phi /= count;
    Ok(SmoothedMoments {
        psi,
        phi,
        res_min: lo,
        res_max: hi,
        loglik_estimate: traj.loglik,
        filter_degenerate_steps: traj.filter_degenerate_steps,
        backward_fallback_steps: traj.fallback.iter().filter(|f| **f).count(),
    })
}

/// Filter, backward simulation and moment accumulation in one call. The
/// filter and the backward pass use independent streams derived from `seed`.
pub fn particle_smoother(
    model: &StateSpaceModel,
    noise: &NoiseParams,
    data: &Dataset,
    num_particles: usize,
    num_trajectories: usize,
    seed: u64,
) -> Result<SmoothedMoments> {
    let cloud = bootstrap_filter(model, noise, data, num_particles, derive_seed(seed, 0xF1))?;
    let traj = backward_simulate(&cloud, model, noise, data, num_trajectories, derive_seed(seed, 0xB5))?;
    accumulate_moments(&traj, model, data)
}
