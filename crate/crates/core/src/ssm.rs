//! State-space models `x_{t+1} = f_t(x_t, u_t) + w_t`, `y_t = g_t(x_t, u_t) + v_t`,
//! datasets, and simulation under truncated-Gaussian noise.
//!
//! Time indices are 1-based throughout: the first record is `t = 1` and the
//! known initial state is `x_1`.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::truncnorm::{BoxSampler, NoiseParams};

/// `(t, x, u) -> value`.
pub type ModelFn = Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// States with any coordinate beyond this magnitude abort a simulation.
const DIVERGENCE_LIMIT: f64 = 1e12;

/// Affine model matrices: `f = A x + B u`, `g = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl AffineSpec {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let p = self.c.nrows();
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.c.ncols() == n
            && self.d.nrows() == p
            && self.d.ncols() == m;
        if !ok || n == 0 || p == 0 {
            return Err(Error::InvalidParams(format!(
                "inconsistent affine matrices A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols(),
                self.c.nrows(),
                self.c.ncols(),
                self.d.nrows(),
                self.d.ncols()
            )));
        }
        Ok((n, m, p))
    }
}

#[derive(Clone)]
pub struct StateSpaceModel {
    n: usize,
    m: usize,
    p: usize,
    transition: ModelFn,
    output: ModelFn,
    affine: Option<AffineSpec>,
}

impl fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .field("affine", &self.affine)
            .finish_non_exhaustive()
    }
}

impl StateSpaceModel {
    pub fn new<F, G>(n: usize, m: usize, p: usize, transition: F, output: G) -> Self
    where
        F: Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            n,
            m,
            p,
            transition: Arc::new(transition),
            output: Arc::new(output),
            affine: None,
        }
    }

    pub fn from_affine(spec: AffineSpec) -> Result<Self> {
        let (n, m, p) = spec.dims()?;
        let (a, b, c, d) = (spec.a.clone(), spec.b.clone(), spec.c.clone(), spec.d.clone());
        Ok(Self {
            n,
            m,
            p,
            transition: Arc::new(move |_, x, u| &a * x + &b * u),
            output: Arc::new(move |_, x, u| &c * x + &d * u),
            affine: Some(spec),
        })
    }

    /// Declares the model affine. The matrices are checked against the
    /// evaluation functions on randomized probe points.
    pub fn with_affine(mut self, spec: AffineSpec) -> Result<Self> {
        let (n, m, p) = spec.dims()?;
        if (n, m, p) != (self.n, self.m, self.p) {
            return Err(Error::InvalidParams("affine spec dimensions differ from model".into()));
        }
        let mut rng = rng_from_seed(0x5eed);
        for t in 1..=8 {
            let x = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let u = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            let fx = self.transition(t, &x, &u)?;
            let gx = self.output(t, &x, &u)?;
            let fa = &spec.a * &x + &spec.b * &u;
            let ga = &spec.c * &x + &spec.d * &u;
            let close = |v: &DVector<f64>, w: &DVector<f64>| {
                v.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()))
            };
            if !close(&fx, &fa) || !close(&gx, &ga) {
                return Err(Error::InvalidParams(format!(
                    "affine spec does not match model functions at probe t={t}"
                )));
            }
        }
        self.affine = Some(spec);
        Ok(self)
    }

    /// The model used in the simulation study: scalar state, input and output,
    /// `f(x, u) = 0.9 x + 2 u`, `g(x, u) = 1.6 x + 1.2 u`.
    pub fn paper_sec6() -> Self {
        Self::from_affine(AffineSpec {
            a: DMatrix::from_element(1, 1, 0.9),
            b: DMatrix::from_element(1, 1, 2.0),
            c: DMatrix::from_element(1, 1, 1.6),
            d: DMatrix::from_element(1, 1, 1.2),
        })
        .expect("static dimensions")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Noise dimension `n + p`.
    pub fn noise_dim(&self) -> usize {
        self.n + self.p
    }

    pub fn affine(&self) -> Option<&AffineSpec> {
        self.affine.as_ref()
    }

    fn check_args(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::dim("state", self.n, x.len()));
        }
        if u.len() != self.m {
            return Err(Error::dim("input", self.m, u.len()));
        }
        Ok(())
    }

    fn checked(v: DVector<f64>, want: usize, what: &str, t: usize) -> Result<DVector<f64>> {
        if v.len() != want {
            return Err(Error::dim(what, want, v.len()));
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite(format!("{what} at t={t}")));
        }
        Ok(v)
    }

    pub fn transition(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_args(x, u)?;
        Self::checked((self.transition)(t, x, u), self.n, "transition output", t)
    }

    pub fn output(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_args(x, u)?;
        Self::checked((self.output)(t, x, u), self.p, "output map value", t)
    }

    /// `h_t(x, u) = [f_t(x, u); g_t(x, u)]`.
    pub fn stacked_eval(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.transition(t, x, u)?;
        let g = self.output(t, x, u)?;
        let mut h = DVector::zeros(self.n + self.p);
        h.rows_mut(0, self.n).copy_from(&f);
        h.rows_mut(self.n, self.p).copy_from(&g);
        Ok(h)
    }

    /// `xi_t - h_t(zeta_t)` with `xi_t = [x_{t+1}; y_t]`.
    pub fn residual(
        &self,
        t: usize,
        x_t: &DVector<f64>,
        x_next: &DVector<f64>,
        u_t: &DVector<f64>,
        y_t: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if x_next.len() != self.n {
            return Err(Error::dim("next state", self.n, x_next.len()));
        }
        if y_t.len() != self.p {
            return Err(Error::dim("output", self.p, y_t.len()));
        }
        let h = self.stacked_eval(t, x_t, u_t)?;
        let mut r = DVector::zeros(self.n + self.p);
        for i in 0..self.n {
            r[i] = x_next[i] - h[i];
        }
        for j in 0..self.p {
            r[self.n + j] = y_t[j] - h[self.n + j];
        }
        Ok(r)
    }
}

/// Adds `draw` to `base` and returns `(sum, sum - base)`, nudging the sum by
/// ulps so that the recomputed residual `sum - base` lies in `[lo, hi]`.
pub(crate) fn settle(base: f64, draw: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut s = base + draw;
    for _ in 0..64 {
        let r = s - base;
        if r < lo {
            s = s.next_up();
        } else if r > hi {
            s = s.next_down();
        } else {
            return (s, r);
        }
    }
    (s, s - base)
}

/// Input/output records with the known initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub x1: DVector<f64>,
    /// `x_1 .. x_{N+1}` from simulation, or `x_1 .. x_N` when read from CSV.
    pub true_states: Option<Vec<DVector<f64>>>,
    /// `eta_1 .. eta_N` from simulation.
    pub true_noise: Option<Vec<DVector<f64>>>,
}

impl Dataset {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>, x1: DVector<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidParams("dataset needs at least one record".into()));
        }
        if inputs.len() != outputs.len() {
            return Err(Error::dim("output records", inputs.len(), outputs.len()));
        }
        Ok(Self {
            inputs,
            outputs,
            x1,
            true_states: None,
            true_noise: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn check_model(&self, model: &StateSpaceModel) -> Result<()> {
        if self.x1.len() != model.n() {
            return Err(Error::dim("initial state", model.n(), self.x1.len()));
        }
        if let Some(u) = self.inputs.iter().find(|u| u.len() != model.m()) {
            return Err(Error::dim("input record", model.m(), u.len()));
        }
        if let Some(y) = self.outputs.iter().find(|y| y.len() != model.p()) {
            return Err(Error::dim("output record", model.p(), y.len()));
        }
        Ok(())
    }

    /// Writes `t,u1..um,y1..yp[,x1..xn]`. State columns are written when
    /// `with_states` is set and true states are available.
    pub fn write_csv<W: Write>(&self, w: W, with_states: bool) -> Result<()> {
        let m = self.inputs[0].len();
        let p = self.outputs[0].len();
        let states = self.true_states.as_ref().filter(|_| with_states);
        let n = self.x1.len();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=p).map(|i| format!("y{i}")));
        if states.is_some() {
            header.extend((1..=n).map(|i| format!("x{i}")));
        }
        wr.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.inputs[t].iter().map(|v| fmt_num(*v)));
            row.extend(self.outputs[t].iter().map(|v| fmt_num(*v)));
            if let Some(xs) = states {
                row.extend(xs[t].iter().map(|v| fmt_num(*v)));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`Dataset::write_csv`]. The initial
    /// state comes from the first row's state columns when present, otherwise
    /// from `x1`.
    pub fn read_csv<R: Read>(r: R, x1: Option<DVector<f64>>) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let col = |prefix: char| -> Vec<usize> {
            header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
                .map(|(i, _)| i)
                .collect()
        };
        if header.get(0) != Some("t") {
            return Err(Error::Config("dataset CSV must start with a `t` column".into()));
        }
        let (ucols, ycols, xcols) = (col('u'), col('y'), col('x'));
        if ycols.is_empty() {
            return Err(Error::Config("dataset CSV has no y columns".into()));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut states = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let get = |cols: &[usize]| -> Result<DVector<f64>> {
                let vals = cols
                    .iter()
                    .map(|&c| {
                        rec.get(c).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| {
                            Error::Config(format!("dataset CSV line {}: bad number in column {}", line + 2, c + 1))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(DVector::from_vec(vals))
            };
            inputs.push(get(&ucols)?);
            outputs.push(get(&ycols)?);
            if !xcols.is_empty() {
                states.push(get(&xcols)?);
            }
        }
        let x1 = match (states.first(), x1) {
            (Some(x), _) => x.clone(),
            (None, Some(x)) => x,
            (None, None) => {
                return Err(Error::Config(
                    "dataset CSV has no state columns and no initial state was given".into(),
                ))
            }
        };
        let mut ds = Dataset::new(inputs, outputs, x1)?;
        if !states.is_empty() {
            ds.true_states = Some(states);
        }
        Ok(ds)
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Iterates the model with i.i.d. truncated-Gaussian noise
/// `eta_t = [w_t; v_t] ~ noise`.
pub fn simulate(
    model: &StateSpaceModel,
    noise: &NoiseParams,
    inputs: &[DVector<f64>],
    x1: &DVector<f64>,
    seed: u64,
) -> Result<Dataset> {
    let (n, p) = (model.n(), model.p());
    if noise.dim() != n + p {
        return Err(Error::dim("noise", n + p, noise.dim()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidParams("no inputs to simulate".into()));
    }
    if x1.len() != n {
        return Err(Error::dim("initial state", n, x1.len()));
    }
    let mut rng = rng_from_seed(seed);
    let draws = BoxSampler::new(noise)?.draw_many(inputs.len(), &mut rng)?;
    let (lo, hi) = (noise.lower(), noise.upper());

    let mut x = x1.clone();
    let mut states = vec![x.clone()];
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut realized = Vec::with_capacity(inputs.len());
    for (k, (u, eta)) in inputs.iter().zip(draws.iter()).enumerate() {
        let t = k + 1;
        let f = model.transition(t, &x, u)?;
        let g = model.output(t, &x, u)?;
        let mut next = DVector::zeros(n);
        let mut y = DVector::zeros(p);
        let mut e = DVector::zeros(n + p);
        for i in 0..n {
            let (s, r) = settle(f[i], eta[i], lo[i], hi[i]);
            next[i] = s;
            e[i] = r;
        }
        for j in 0..p {
            let (s, r) = settle(g[j], eta[n + j], lo[n + j], hi[n + j]);
            y[j] = s;
            e[n + j] = r;
        }
        if next.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::Divergence { t });
        }
        outputs.push(y);
        realized.push(e);
        states.push(next.clone());
        x = next;
    }
    let mut ds = Dataset::new(inputs.to_vec(), outputs, x1.clone())?;
    ds.true_states = Some(states);
    ds.true_noise = Some(realized);
    Ok(ds)
}

/// I.i.d. standard normal inputs of dimension `m`.
pub fn gaussian_inputs(m: usize, len: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..len)
        .map(|_| DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng)))
        .collect()
}
