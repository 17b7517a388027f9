//! EM driver: initialization, bound updates, the moment-matching fixed point,
//! the per-iteration objective, and the two estimators (truncated-Gaussian EM
//! with a particle E-step, Gaussian EM with an exact RTS E-step).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::smoothing::{particle_smoother, rts_smoother, SmoothedMoments};
use crate::ssm::{Dataset, StateSpaceModel};
use crate::truncnorm::{log_mass, truncated_moments, ExtReal, McOptions, NoiseParams};

/// How one coordinate's truncation bounds are handled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    /// Known bounds, never updated.
    Fixed(ExtReal, ExtReal),
    /// Bounds taken from the smoothed residual support each iteration.
    Estimate,
    /// Untruncated coordinate.
    Infinite,
}

/// Sparsity imposed on the covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovStructure {
    Full,
    /// State-noise and output-noise blocks uncorrelated.
    #[default]
    BlockDiagonal,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "tg-em")]
    TgEm,
    #[serde(rename = "ks-em")]
    KsEm,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::TgEm => "tg-em",
            Method::KsEm => "ks-em",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once every parameter component changes by less than this
    /// fraction of its previous value.
    pub param_rel_tol: f64,
    pub particles: usize,
    /// Backward trajectories; `None` means as many as particles.
    pub trajectories: Option<usize>,
    pub fixed_point_max_iters: usize,
    pub fixed_point_tol: f64,
    /// One entry per noise coordinate; empty means estimate every bound.
    pub bound_modes: Vec<BoundMode>,
    pub bound_inflation: f64,
    pub covariance: CovStructure,
    pub master_seed: u64,
    /// Sample budget for Monte Carlo moments of correlated components.
    pub mc_samples: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            param_rel_tol: 1e-4,
            particles: 500,
            trajectories: None,
            fixed_point_max_iters: 200,
            fixed_point_tol: 1e-10,
            bound_modes: Vec::new(),
            bound_inflation: 0.01,
            covariance: CovStructure::BlockDiagonal,
            master_seed: 0,
            mc_samples: McOptions::DEFAULT_SAMPLES,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.param_rel_tol > 0.0) || !(self.fixed_point_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.fixed_point_max_iters == 0 {
            return bad("fixed_point_max_iters must be >= 1");
        }
        if self.particles < 2 {
            return bad("particles must be >= 2");
        }
        if self.trajectories == Some(0) {
            return bad("trajectories must be >= 1");
        }
        if !(self.bound_inflation >= 0.0) {
            return bad("bound_inflation must be non-negative");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be >= 1");
        }
        for (i, m) in self.bound_modes.iter().enumerate() {
            if let BoundMode::Fixed(a, b) = m {
                if !(a.0 < b.0) || a.0 == f64::INFINITY || b.0 == f64::NEG_INFINITY {
                    return Err(Error::Config(format!("fixed bounds at coordinate {i} need a < b")));
                }
            }
        }
        Ok(())
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.unwrap_or(self.particles)
    }

    pub fn mode(&self, i: usize) -> BoundMode {
        self.bound_modes.get(i).copied().unwrap_or(BoundMode::Estimate)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if !self.bound_modes.is_empty() && self.bound_modes.len() != d {
            return Err(Error::dim("bound_modes", d, self.bound_modes.len()));
        }
        Ok(())
    }

    pub fn fixed_point_options(&self, seed: u64) -> FixedPointOptions {
        FixedPointOptions {
            max_iters: self.fixed_point_max_iters,
            tol: self.fixed_point_tol,
            mc: McOptions {
                samples: self.mc_samples,
                seed,
            },
        }
    }

    /// Index sets solved independently in the M-step.
    pub fn blocks(&self, n: usize, d: usize) -> Vec<Vec<usize>> {
        match self.covariance {
            CovStructure::Full => vec![(0..d).collect()],
            CovStructure::BlockDiagonal => vec![(0..n).collect(), (n..d).collect()],
            CovStructure::Diagonal => (0..d).map(|i| vec![i]).collect(),
        }
    }

    /// Overrides the bounds of `beta` according to the fixed/infinite modes.
    pub fn apply_bound_modes(&self, beta: &NoiseParams) -> Result<NoiseParams> {
        self.check_dim(beta.dim())?;
        let mut lo = beta.lower().clone();
        let mut hi = beta.upper().clone();
        for i in 0..beta.dim() {
            match self.mode(i) {
                BoundMode::Fixed(a, b) => {
                    lo[i] = a.0;
                    hi[i] = b.0;
                }
                BoundMode::Infinite => {
                    lo[i] = f64::NEG_INFINITY;
                    hi[i] = f64::INFINITY;
                }
                BoundMode::Estimate => {}
            }
        }
        beta.with_bounds(lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub mc: McOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest entry of `|M1 - psi|` and `|M2 - phi|` at the result.
    pub moment_residual: f64,
}

/// Symmetrizes and floors eigenvalues at `1e-10 * tr / d`.
pub fn repair_pd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let floor = 1e-10 * sym.trace() / d as f64;
    if !(floor > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("covariance trace {}", sym.trace())));
    }
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(sym);
    }
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok((&fixed + fixed.transpose()) * 0.5)
}

/// `phi - psi mu^T - mu psi^T + mu mu^T`, the second moment about `mu`.
fn centered(psi: &DVector<f64>, phi: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let d = psi.len();
    DMatrix::from_fn(d, d, |i, j| phi[(i, j)] - psi[i] * mu[j] - mu[i] * psi[j] + mu[i] * mu[j])
}

/// Second moment about zero of `TN(0, sigma, lower - mu, upper - mu)` and its mean.
fn shifted_moments(
    sigma: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    mu: &DVector<f64>,
    mc: &McOptions,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = mu.len();
    let p = NoiseParams::new(DVector::zeros(d), sigma.clone(), lower - mu, upper - mu)?;
    truncated_moments(&p, mc)
}

/// History length of the Anderson mixing used to speed up the fixed point.
const ANDERSON_DEPTH: usize = 5;

/// `(mu, upper triangle of sigma)` as one vector.
fn pack(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> DVector<f64> {
    let d = mu.len();
    let mut v = Vec::with_capacity(d + d * (d + 1) / 2);
    v.extend(mu.iter());
    for j in 0..d {
        for i in 0..=j {
            v.push(sigma[(i, j)]);
        }
    }
    DVector::from_vec(v)
}

fn unpack(x: &DVector<f64>, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mu = x.rows(0, d).clone_owned();
    let mut sigma = DMatrix::zeros(d, d);
    let mut k = d;
    for j in 0..d {
        for i in 0..=j {
            sigma[(i, j)] = x[k];
            sigma[(j, i)] = x[k];
            k += 1;
        }
    }
    (mu, sigma)
}

fn admissible(x: &DVector<f64>, d: usize) -> bool {
    x.iter().all(|v| v.is_finite()) && unpack(x, d).1.cholesky().is_some()
}

/// Type-II Anderson mixing over the last few map evaluations.
struct Anderson {
    depth: usize,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    dg: Vec<DVector<f64>>,
    df: Vec<DVector<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, prev: None, dg: Vec::new(), df: Vec::new() }
    }

    fn clear(&mut self) {
        self.prev = None;
        self.dg.clear();
        self.df.clear();
    }

    /// Records the map value `g` and residual `f = g - x`, returns the mixed
    /// iterate once there is history.
    fn extrapolate(&mut self, g: &DVector<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
        if let Some((pg, pf)) = self.prev.take() {
            self.dg.push(g - pg);
            self.df.push(f - pf);
            if self.dg.len() > self.depth {
                self.dg.remove(0);
                self.df.remove(0);
            }
        }
        self.prev = Some((g.clone(), f.clone()));
        if self.df.is_empty() {
            return None;
        }
        let df = DMatrix::from_columns(&self.df);
        let gamma = df.svd(true, true).solve(f, 1e-12).ok()?;
        let dg = DMatrix::from_columns(&self.dg);
        Some(g - dg * gamma)
    }
}

/// Groups of coordinates linked by a non-negligible entry of any of `mats`.
fn coupled_groups(mats: &[&DMatrix<f64>]) -> Vec<Vec<usize>> {
    let d = mats[0].nrows();
    let mut root: Vec<usize> = (0..d).collect();
    fn find(root: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while root[r] != r {
            r = root[r];
        }
        root[i] = r;
        r
    }
    for m in mats {
        for j in 0..d {
            for i in 0..j {
                let scale = (m[(i, i)] * m[(j, j)]).abs().sqrt();
                if m[(i, j)].abs().max(m[(j, i)].abs()) > 1e-12 * scale {
                    let (a, b) = (find(&mut root, i), find(&mut root, j));
                    root[a] = b;
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; d];
    for i in 0..d {
        let r = find(&mut root, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

fn moment_residual(
    psi: &DVector<f64>,
    phi: &DMatrix<f64>,
    p: &NoiseParams,
    mc: &McOptions,
) -> Result<f64> {
    let (m1, m2) = truncated_moments(p, mc)?;
    Ok((m1 - psi).amax().max((m2 - phi).amax()))
}

/// Solves `E[eta] = psi`, `E[eta eta^T] = phi` under `TN(mu, sigma, lower, upper)`
/// for `(mu, sigma)` with the bounds held fixed.
///
/// Iterates `mu <- psi - m1(0, sigma, a - mu, b - mu)` and
/// `sigma <- S(mu) + sigma - m2(0, sigma, a - mu, b - mu)`, where `S(mu)` is
/// the sample second moment about `mu` and `m1`, `m2` are normalized truncated
/// moments. The map is accelerated by Anderson mixing, with a fallback to the
/// plain step whenever the mixed iterate is not admissible. Convergence is
/// declared when one map evaluation moves no component of `(mu, sigma)` by
/// more than `tol * max(1, |value|)`.
///
/// When the sample covariance `S(psi)` and `init_sigma` both decouple across
/// groups of coordinates, each group is solved on its own; the product of the
/// group solutions solves the joint equations.
pub fn fixed_point_update(
    psi: &DVector<f64>,
    phi: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    init_mu: &DVector<f64>,
    init_sigma: &DMatrix<f64>,
    opts: &FixedPointOptions,
) -> Result<FixedPointResult> {
    let d = psi.len();
    for (what, got) in [
        ("phi", phi.nrows()),
        ("lower", lower.len()),
        ("upper", upper.len()),
        ("init_mu", init_mu.len()),
        ("init_sigma", init_sigma.nrows()),
    ] {
        if got != d {
            return Err(Error::dim(what, d, got));
        }
    }
    let untruncated = lower.iter().all(|v| *v == f64::NEG_INFINITY) && upper.iter().all(|v| *v == f64::INFINITY);
    if untruncated {
        let sigma = repair_pd(&centered(psi, phi, psi))?;
        return Ok(FixedPointResult {
            mu: psi.clone(),
            sigma,
            iterations: 1,
            converged: true,
            moment_residual: 0.0,
        });
    }

    let groups = coupled_groups(&[&centered(psi, phi, psi), init_sigma]);
    if groups.len() == 1 {
        return solve_joint(psi, phi, lower, upper, init_mu, init_sigma, opts);
    }
    let mut mu = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, d);
    let (mut iterations, mut converged) = (0, true);
    for g in &groups {
        let k = g.len();
        let v = |x: &DVector<f64>| DVector::from_fn(k, |r, _| x[g[r]]);
        let m = |x: &DMatrix<f64>| DMatrix::from_fn(k, k, |r, c| x[(g[r], g[c])]);
        let res = solve_joint(&v(psi), &m(phi), &v(lower), &v(upper), &v(init_mu), &m(init_sigma), opts)?;
        for (r, &i) in g.iter().enumerate() {
            mu[i] = res.mu[r];
            for (c, &j) in g.iter().enumerate() {
                sigma[(i, j)] = res.sigma[(r, c)];
            }
        }
        iterations = iterations.max(res.iterations);
        converged &= res.converged;
    }
    let p = NoiseParams::new(mu.clone(), sigma.clone(), lower.clone(), upper.clone())?;
    Ok(FixedPointResult {
        moment_residual: moment_residual(psi, phi, &p, &opts.mc)?,
        mu,
        sigma,
        iterations,
        converged,
    })
}

fn solve_joint(
    psi: &DVector<f64>,
    phi: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    init_mu: &DVector<f64>,
    init_sigma: &DMatrix<f64>,
    opts: &FixedPointOptions,
) -> Result<FixedPointResult> {
    let d = psi.len();
    let map = |mu: &DVector<f64>, sigma: &DMatrix<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m1, _) = shifted_moments(sigma, lower, upper, mu, &opts.mc)?;
        let mu_next = psi - m1;
        let (_, m2) = shifted_moments(sigma, lower, upper, &mu_next, &opts.mc)?;
        let sigma_next = repair_pd(&(centered(psi, phi, &mu_next) + sigma - m2))?;
        Ok((mu_next, sigma_next))
    };

    let mut x = pack(init_mu, &repair_pd(init_sigma)?);
    let mut accelerated = false;
    let mut last_plain: Option<DVector<f64>> = None;
    let mut anderson = Anderson::new(ANDERSON_DEPTH);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let (mu, sigma) = unpack(&x, d);
        let (mu_g, sigma_g) = match map(&mu, &sigma) {
            Ok(v) => v,
            Err(_) if accelerated => {
                x = last_plain.clone().expect("set before any extrapolation");
                anderson.clear();
                accelerated = false;
                continue;
            }
            Err(e) => return Err(e),
        };
        let g = pack(&mu_g, &sigma_g);
        let small = g
            .iter()
            .zip(x.iter())
            .all(|(n, o)| (n - o).abs() <= opts.tol * o.abs().max(1.0));
        if small {
            x = g;
            converged = true;
            break;
        }
        let f = &g - &x;
        let candidate = anderson.extrapolate(&g, &f);
        last_plain = Some(g.clone());
        accelerated = false;
        x = match candidate {
            Some(c) if admissible(&c, d) => {
                accelerated = true;
                c
            }
            Some(_) => {
                anderson.clear();
                g
            }
            None => g,
        };
    }
    let (mu, sigma) = unpack(&x, d);
    let sigma = repair_pd(&sigma)?;

    let p = NoiseParams::new(mu.clone(), sigma.clone(), lower.clone(), upper.clone())?;
    Ok(FixedPointResult {
        moment_residual: moment_residual(psi, phi, &p, &opts.mc)?,
        mu,
        sigma,
        iterations,
        converged,
    })
}

/// The M-step objective at `beta` given smoothed moments:
/// `tr(Sigma^-1 S(mu)) / 2 + log det(2 pi Sigma) / 2 + log mass`.
pub fn evaluate_vk(beta: &NoiseParams, moments: &SmoothedMoments, mc: &McOptions) -> Result<f64> {
    let d = beta.dim();
    if moments.dim() != d {
        return Err(Error::dim("moments", d, moments.dim()));
    }
    let chol = beta
        .sigma()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("sigma in objective".into()))?;
    let s = centered(&moments.psi, &moments.phi, beta.mu());
    let trace = chol.solve(&s).trace();
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(0.5 * trace + 0.5 * (ln_det + d as f64 * ln2pi) + log_mass(beta, mc)?)
}

/// Starting estimate from smoothed moments: `mu = psi`, `Sigma = phi - psi psi^T`,
/// projected onto the configured covariance structure and repaired to PD.
/// Estimated bounds start at the inflated residual extrema.
pub fn initialize(moments: &SmoothedMoments, n: usize, config: &EmConfig) -> Result<NoiseParams> {
    let d = moments.dim();
    config.check_dim(d)?;
    let cov = centered(&moments.psi, &moments.phi, &moments.psi);
    let cov = (&cov + cov.transpose()) * 0.5;
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-8 * cov.trace().abs().max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "initial covariance has eigenvalue {min_eig:e}"
        )));
    }
    let sigma = repair_pd(&project(&cov, &config.blocks(n, d)))?;
    let (lo, hi) = bounds_for(moments, config, None)?;
    NoiseParams::new(moments.psi.clone(), sigma, lo, hi)
}

/// Zeroes the entries coupling different blocks.
fn project(m: &DMatrix<f64>, blocks: &[Vec<usize>]) -> DMatrix<f64> {
    let d = m.nrows();
    let mut owner = vec![0; d];
    for (b, idx) in blocks.iter().enumerate() {
        for &i in idx {
            owner[i] = b;
        }
    }
    DMatrix::from_fn(d, d, |i, j| if owner[i] == owner[j] { m[(i, j)] } else { 0.0 })
}

fn bounds_for(
    moments: &SmoothedMoments,
    config: &EmConfig,
    previous: Option<&NoiseParams>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = moments.dim();
    if let Some(p) = previous {
        if p.dim() != d {
            return Err(Error::dim("previous parameters", d, p.dim()));
        }
    }
    let mut lo = DVector::zeros(d);
    let mut hi = DVector::zeros(d);
    for i in 0..d {
        let (a, b) = match config.mode(i) {
            BoundMode::Fixed(a, b) => (a.0, b.0),
            BoundMode::Infinite => (f64::NEG_INFINITY, f64::INFINITY),
            BoundMode::Estimate => {
                let (rmin, rmax) = (moments.res_min[i], moments.res_max[i]);
                let spread = rmax - rmin;
                if !(spread > 0.0) {
                    return Err(Error::DegenerateSpread { coord: i });
                }
                let eps = config.bound_inflation * spread;
                (rmin - eps, rmax + eps)
            }
        };
        lo[i] = a;
        hi[i] = b;
    }
    Ok((lo, hi))
}

/// New bounds from the smoothed residual support.
pub fn update_bounds(
    moments: &SmoothedMoments,
    config: &EmConfig,
    previous: &NoiseParams,
) -> Result<(DVector<f64>, DVector<f64>)> {
    config.check_dim(moments.dim())?;
    bounds_for(moments, config, Some(previous))
}

/// One record per parameter iterate. Entry `k` holds `beta^(k)`, the
/// log-likelihood estimate of the E-step run under it, and the diagnostics of
/// the M-step that produced it (absent for the initial entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iter: usize,
    pub beta: NoiseParams,
    pub vk: Option<f64>,
    pub loglik: Option<f64>,
    pub fixed_point_iters: usize,
    pub fixed_point_converged: bool,
    pub filter_degenerate_steps: usize,
    pub backward_fallback_steps: usize,
    /// Coordinates whose E-step residual extrema fall outside this iterate's bounds.
    pub feasibility_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub method: Method,
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
    /// Number of E/M cycles performed.
    pub iterations_used: usize,
}

impl EmTrace {
    fn new(method: Method, init: NoiseParams) -> Self {
        Self {
            method,
            iterations: vec![EmIteration {
                iter: 1,
                beta: init,
                vk: None,
                loglik: None,
                fixed_point_iters: 0,
                fixed_point_converged: true,
                filter_degenerate_steps: 0,
                backward_fallback_steps: 0,
                feasibility_violations: 0,
            }],
            converged: false,
            iterations_used: 0,
        }
    }

    pub fn final_beta(&self) -> &NoiseParams {
        &self.iterations.last().expect("trace holds the initial iterate").beta
    }

    pub fn total_feasibility_violations(&self) -> usize {
        self.iterations.iter().map(|i| i.feasibility_violations).sum()
    }

    pub fn total_degenerate_steps(&self) -> usize {
        self.iterations.iter().map(|i| i.filter_degenerate_steps).sum()
    }
}

/// An estimation run that stopped on an error; `trace` holds every iterate
/// completed before it.
#[derive(Debug)]
pub struct EmAbort {
    pub error: Error,
    pub trace: EmTrace,
}

impl fmt::Display for EmAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} aborted after {} iteration(s): {}",
            self.trace.method, self.trace.iterations_used, self.error
        )
    }
}

impl std::error::Error for EmAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<EmAbort> for Error {
    fn from(a: EmAbort) -> Self {
        a.error
    }
}

fn relative_change_small(old: &NoiseParams, new: &NoiseParams, tol: f64) -> bool {
    old.flatten().iter().zip(new.flatten()).all(|(o, n)| {
        o == &n || (o.is_finite() && (n - o).abs() <= tol * o.abs())
    })
}

/// M-step for fixed bounds, solved block by block and warm-started at `prev`.
fn m_step(
    moments: &SmoothedMoments,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    prev: &NoiseParams,
    blocks: &[Vec<usize>],
    opts: &FixedPointOptions,
) -> Result<(NoiseParams, usize, bool)> {
    let d = moments.dim();
    let mut mu = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, d);
    let mut iters = 0;
    let mut converged = true;
    for block in blocks.iter().filter(|b| !b.is_empty()) {
        let k = block.len();
        let pick_v = |v: &DVector<f64>| DVector::from_fn(k, |r, _| v[block[r]]);
        let pick_m = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |r, c| m[(block[r], block[c])]);
        let res = fixed_point_update(
            &pick_v(&moments.psi),
            &pick_m(&moments.phi),
            &pick_v(lo),
            &pick_v(hi),
            &pick_v(prev.mu()),
            &pick_m(prev.sigma()),
            opts,
        )?;
        for (r, &i) in block.iter().enumerate() {
            mu[i] = res.mu[r];
            for (c, &j) in block.iter().enumerate() {
                sigma[(i, j)] = res.sigma[(r, c)];
            }
        }
        iters = iters.max(res.iterations);
        converged &= res.converged;
    }
    Ok((NoiseParams::new(mu, sigma, lo.clone(), hi.clone())?, iters, converged))
}

enum EStep {
    Particle,
    Rts,
}

fn run(
    method: Method,
    model: &StateSpaceModel,
    data: &Dataset,
    config: &EmConfig,
    init: &NoiseParams,
) -> std::result::Result<EmTrace, EmAbort> {
    let e_step = match method {
        Method::TgEm => EStep::Particle,
        Method::KsEm => EStep::Rts,
    };
    let d = model.noise_dim();
    let setup = || -> Result<NoiseParams> {
        config.validate()?;
        data.check_model(model)?;
        if init.dim() != d {
            return Err(Error::dim("initial parameters", d, init.dim()));
        }
        if matches!(e_step, EStep::Rts) && model.affine().is_none() {
            return Err(Error::NotAffine);
        }
        let blocks = config.blocks(model.n(), d);
        let sigma = repair_pd(&project(init.sigma(), &blocks))?;
        let start = NoiseParams::new(init.mu().clone(), sigma, init.lower().clone(), init.upper().clone())?;
        match e_step {
            EStep::Particle => config.apply_bound_modes(&start),
            EStep::Rts => NoiseParams::gaussian(start.mu().clone(), start.sigma().clone()),
        }
    };
    let start = match setup() {
        Ok(s) => s,
        Err(error) => {
            return Err(EmAbort {
                error,
                trace: EmTrace::new(method, init.clone()),
            })
        }
    };

    let mut trace = EmTrace::new(method, start);
    let blocks = config.blocks(model.n(), d);
    for k in 1..=config.max_iterations {
        let beta = trace.final_beta().clone();
        let seed = derive_seed(config.master_seed, k as u64);
        let step = || -> Result<(SmoothedMoments, NoiseParams, usize, bool)> {
            let moments = match e_step {
                EStep::Particle => {
                    particle_smoother(model, &beta, data, config.particles, config.num_trajectories(), seed)?
                }
                EStep::Rts => rts_smoother(model, &beta, data)?,
            };
            let (lo, hi) = match e_step {
                EStep::Particle => update_bounds(&moments, config, &beta)?,
                EStep::Rts => (beta.lower().clone(), beta.upper().clone()),
            };
            let opts = config.fixed_point_options(derive_seed(seed, 0x3d));
            let (next, iters, conv) = m_step(&moments, &lo, &hi, &beta, &blocks, &opts)?;
            Ok((moments, next, iters, conv))
        };
        let (moments, next, fp_iters, fp_conv) = match step() {
            Ok(v) => v,
            Err(error) => return Err(EmAbort { error, trace }),
        };
        let mc = McOptions {
            samples: config.mc_samples,
            seed: derive_seed(seed, 0x7a),
        };
        let vk = evaluate_vk(&next, &moments, &mc).ok();
        let violations = match e_step {
            EStep::Particle => moments.bound_violations(next.lower(), next.upper()),
            EStep::Rts => 0,
        };
        let last = trace.iterations.last_mut().expect("non-empty");
        last.loglik = Some(moments.loglik_estimate);
        last.filter_degenerate_steps = moments.filter_degenerate_steps;
        last.backward_fallback_steps = moments.backward_fallback_steps;
        let done = relative_change_small(&beta, &next, config.param_rel_tol);
        trace.iterations.push(EmIteration {
            iter: k + 1,
            beta: next,
            vk,
            loglik: None,
            fixed_point_iters: fp_iters,
            fixed_point_converged: fp_conv,
            filter_degenerate_steps: 0,
            backward_fallback_steps: 0,
            feasibility_violations: violations,
        });
        trace.iterations_used = k;
        if done {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Truncated-Gaussian EM with a particle-smoothing E-step, started at `init`.
/// Bounds of `init` are overridden by the fixed/infinite bound modes.
pub fn run_em(
    model: &StateSpaceModel,
    data: &Dataset,
    config: &EmConfig,
    init: &NoiseParams,
) -> std::result::Result<EmTrace, EmAbort> {
    run(Method::TgEm, model, data, config, init)
}

/// Gaussian EM with the exact RTS E-step; bounds of `init` are dropped.
pub fn run_ksem(
    model: &StateSpaceModel,
    data: &Dataset,
    config: &EmConfig,
    init: &NoiseParams,
) -> std::result::Result<EmTrace, EmAbort> {
    run(Method::KsEm, model, data, config, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::truncnorm::uni_moments;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn m(r: usize, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, r, x)
    }

    fn opts() -> FixedPointOptions {
        EmConfig::default().fixed_point_options(0)
    }

    fn inf(d: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(d, f64::NEG_INFINITY), DVector::from_element(d, f64::INFINITY))
    }

    #[test]
    fn initialize_identity() {
        let mom = SmoothedMoments::from_psi_phi(v(&[0.0, 0.0]), DMatrix::identity(2, 2));
        let cfg = EmConfig {
            bound_modes: vec![BoundMode::Infinite; 2],
            ..Default::default()
        };
        let b = initialize(&mom, 1, &cfg).unwrap();
        assert_eq!(b.mu(), &v(&[0.0, 0.0]));
        assert_eq!(b.sigma(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn initialize_hand_moments() {
        let mom = SmoothedMoments::from_psi_phi(v(&[1.0, 2.0]), m(2, &[2.0, 2.0, 2.0, 5.0]));
        let cfg = EmConfig {
            bound_modes: vec![BoundMode::Infinite; 2],
            covariance: CovStructure::Full,
            ..Default::default()
        };
        let b = initialize(&mom, 1, &cfg).unwrap();
        assert!((b.sigma() - DMatrix::identity(2, 2)).amax() < 1e-15);
        assert_eq!(b.mu(), &v(&[1.0, 2.0]));
    }

    #[test]
    fn initialize_rejects_indefinite() {
        let mom = SmoothedMoments::from_psi_phi(v(&[0.0, 0.0]), m(2, &[1.0, 2.0, 2.0, 1.0]));
        let cfg = EmConfig {
            bound_modes: vec![BoundMode::Infinite; 2],
            covariance: CovStructure::Full,
            ..Default::default()
        };
        assert!(initialize(&mom, 1, &cfg).is_err());
    }

    #[test]
    fn bound_modes() {
        let mut mom = SmoothedMoments::from_psi_phi(v(&[0.0, 0.0, 0.0]), DMatrix::identity(3, 3));
        mom.res_min = v(&[-1.2, -1.0, -5.0]);
        mom.res_max = v(&[2.0, 1.0, 5.0]);
        let cfg = EmConfig {
            bound_modes: vec![
                BoundMode::Estimate,
                BoundMode::Fixed(ExtReal(-1.5), ExtReal(2.5)),
                BoundMode::Infinite,
            ],
            ..Default::default()
        };
        let prev = NoiseParams::gaussian(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let (lo, hi) = update_bounds(&mom, &cfg, &prev).unwrap();
        assert!((lo[0] + 1.232).abs() < 1e-12 && (hi[0] - 2.032).abs() < 1e-12);
        assert_eq!((lo[1], hi[1]), (-1.5, 2.5));
        assert_eq!((lo[2], hi[2]), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn degenerate_spread_is_an_error() {
        let mut mom = SmoothedMoments::from_psi_phi(v(&[0.0]), DMatrix::identity(1, 1));
        mom.res_min = v(&[0.5]);
        mom.res_max = v(&[0.5]);
        let prev = NoiseParams::scalar(0.0, 1.0, -1.0, 1.0).unwrap();
        let r = update_bounds(&mom, &EmConfig::default(), &prev);
        assert!(matches!(r, Err(Error::DegenerateSpread { coord: 0 })));
    }

    #[test]
    fn untruncated_fixed_point_is_one_step() {
        let psi = v(&[0.3, -0.2]);
        let phi = m(2, &[1.5, 0.1, 0.1, 0.9]);
        let (lo, hi) = inf(2);
        let r = fixed_point_update(&psi, &phi, &lo, &hi, &v(&[5.0, 5.0]), &DMatrix::identity(2, 2), &opts()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.mu, psi);
        assert!((r.sigma - (&phi - &psi * psi.transpose())).amax() <= 1e-12);
    }

    #[test]
    fn scalar_self_consistency() {
        let t = uni_moments(-0.3, 1.0, -1.5, 2.5).unwrap();
        let psi = v(&[t.mean]);
        let phi = m(1, &[t.second]);
        let init_sigma = m(1, &[t.variance()]);
        let r = fixed_point_update(&psi, &phi, &v(&[-1.5]), &v(&[2.5]), &psi, &init_sigma, &opts()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.mu[0] + 0.3).abs() < 1e-6);
        assert!((r.sigma[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(r.moment_residual < 1e-9);
    }

    #[test]
    fn symmetric_box_keeps_zero_mean() {
        let t = uni_moments(0.0, 1.0, -1.3, 1.3).unwrap();
        let o = FixedPointOptions { max_iters: 25, ..opts() };
        for iters in 1..=5 {
            let o = FixedPointOptions { max_iters: iters, ..o };
            let r = fixed_point_update(&v(&[0.0]), &m(1, &[t.second]), &v(&[-1.3]), &v(&[1.3]), &v(&[0.0]), &m(1, &[0.5]), &o)
                .unwrap();
            assert_eq!(r.mu[0], 0.0);
        }
    }

    #[test]
    fn objective_closed_forms() {
        let d = 3;
        let beta = NoiseParams::gaussian(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
        let mom = SmoothedMoments::from_psi_phi(DVector::zeros(d), DMatrix::identity(d, d));
        let mc = McOptions::with_seed(0);
        let val = evaluate_vk(&beta, &mom, &mc).unwrap();
        let want = d as f64 / 2.0 + d as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((val - want).abs() < 1e-12);

        let b1 = NoiseParams::gaussian(v(&[0.0]), m(1, &[0.7])).unwrap();
        let b2 = NoiseParams::gaussian(v(&[0.0]), m(1, &[1.4])).unwrap();
        let m1 = SmoothedMoments::from_psi_phi(v(&[0.0]), m(1, &[0.9]));
        let m2 = SmoothedMoments::from_psi_phi(v(&[0.0]), m(1, &[1.8]));
        let diff = evaluate_vk(&b2, &m2, &mc).unwrap() - evaluate_vk(&b1, &m1, &mc).unwrap();
        assert!((diff - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_decreases_objective() {
        let psi = v(&[0.1]);
        let phi = m(1, &[0.6]);
        let (lo, hi) = (v(&[-1.5]), v(&[2.5]));
        let init = NoiseParams::new(v(&[0.4]), m(1, &[0.8]), lo.clone(), hi.clone()).unwrap();
        let r = fixed_point_update(&psi, &phi, &lo, &hi, init.mu(), init.sigma(), &opts()).unwrap();
        let out = NoiseParams::new(r.mu, r.sigma, lo, hi).unwrap();
        let mom = SmoothedMoments::from_psi_phi(psi, phi);
        let mc = McOptions::with_seed(0);
        assert!(evaluate_vk(&out, &mom, &mc).unwrap() <= evaluate_vk(&init, &mom, &mc).unwrap());
    }

    #[test]
    fn repair_floors_eigenvalues() {
        let s = repair_pd(&m(2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(s.clone().cholesky().is_some());
        assert!((s - m(2, &[1.0, 1.0, 1.0, 1.0])).amax() < 1e-9);
        assert!(repair_pd(&m(1, &[-1.0])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default().validate().is_ok());
        let bad = EmConfig {
            bound_modes: vec![BoundMode::Fixed(ExtReal(1.0), ExtReal(1.0))],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EmConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(EmConfig { particles: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = EmConfig {
            bound_modes: vec![
                BoundMode::Fixed(ExtReal(-1.5), ExtReal(f64::INFINITY)),
                BoundMode::Infinite,
                BoundMode::Estimate,
            ],
            trajectories: Some(7),
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("+inf"));
        let back: EmConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }
}
