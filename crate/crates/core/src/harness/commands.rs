use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, InitSpec, InputSpec};
use super::stats::FiveNumber;
use crate::em::{repair_pd, run_em, run_ksem, BoundMode, EmAbort, EmTrace, Method};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::ssm::{gaussian_inputs, simulate, Dataset};
use crate::truncnorm::{fmt_ext, uni_moments, NoiseParams};

/// Share of failed runs per method above which a Monte Carlo study aborts.
const MAX_FAILURE_RATE: f64 = 0.2;

pub fn load_inputs(cfg: &ExperimentConfig, m: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    match &cfg.inputs {
        InputSpec::Gaussian => Ok(gaussian_inputs(m, cfg.n_samples, seed)),
        InputSpec::Csv(path) => {
            let file = File::open(path).map_err(|e| Error::Config(format!("cannot open inputs {}: {e}", path.display())))?;
            let mut rd = csv::Reader::from_reader(BufReader::new(file));
            let header = rd.headers()?.clone();
            let mut cols: Vec<usize> = header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with('u') && h[1..].parse::<usize>().is_ok())
                .map(|(i, _)| i)
                .collect();
            if cols.is_empty() {
                cols = (0..header.len()).collect();
            }
            if cols.len() != m {
                return Err(Error::Config(format!("inputs CSV has {} input columns, model needs {m}", cols.len())));
            }
            let mut out = Vec::with_capacity(cfg.n_samples);
            for (line, rec) in rd.records().enumerate().take(cfg.n_samples) {
                let rec = rec?;
                let vals = cols
                    .iter()
                    .map(|&c| {
                        rec.get(c).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| {
                            Error::Config(format!("inputs CSV line {}: bad number in column {}", line + 2, c + 1))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                out.push(DVector::from_vec(vals));
            }
            if out.len() < cfg.n_samples {
                return Err(Error::Config(format!(
                    "inputs CSV has {} rows, n_samples is {}",
                    out.len(),
                    cfg.n_samples
                )));
            }
            Ok(out)
        }
    }
}

/// Simulated dataset for `seed`; inputs and noise use separate derived streams.
pub fn simulate_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let model = cfg.model.build()?;
    let inputs = load_inputs(cfg, model.m(), derive_seed(seed, 1))?;
    simulate(&model, &cfg.noise, &inputs, &cfg.x1(), derive_seed(seed, 2))
}

/// Per-coordinate min/max/mean of the realized noise.
pub fn noise_report(data: &Dataset) -> String {
    let mut out = String::from("coord        min                     max                     mean\n");
    if let Some(noise) = &data.true_noise {
        let d = noise.first().map_or(0, |e| e.len());
        for i in 0..d {
            let vals = noise.iter().map(|e| e[i]);
            let min = vals.clone().fold(f64::INFINITY, f64::min);
            let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let mean = vals.sum::<f64>() / noise.len() as f64;
            out.push_str(&format!("{:<12} {:<23} {:<23} {}\n", i + 1, fmt_ext(min), fmt_ext(max), fmt_ext(mean)));
        }
    }
    out
}

/// Simulates with `seed` (default: the config seed), writes the dataset CSV
/// with true states, and returns the dataset and a realized-noise report.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<(Dataset, String)> {
    let data = simulate_dataset(cfg, seed.unwrap_or(cfg.seed))?;
    let file = File::create(out).map_err(|e| Error::Config(format!("cannot write {}: {e}", out.display())))?;
    data.write_csv(BufWriter::new(file), true)?;
    let report = noise_report(&data);
    Ok((data, report))
}

/// Moves each mean and covariance entry of `truth` uniformly within
/// `rate * |value|`. Bounds move only for coordinates in estimate mode.
pub fn perturb(truth: &NoiseParams, rate: f64, modes: &[BoundMode], seed: u64) -> Result<NoiseParams> {
    let mut rng = rng_from_seed(seed);
    let mut jitter = |v: f64| v + rate * v.abs() * (2.0 * rng.random::<f64>() - 1.0);
    let d = truth.dim();
    let mu = truth.mu().map(&mut jitter);
    let mut sigma = truth.sigma().clone();
    for j in 0..d {
        for i in 0..=j {
            let v = jitter(sigma[(i, j)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let mut lo = truth.lower().clone();
    let mut hi = truth.upper().clone();
    for i in 0..d {
        if matches!(modes.get(i), None | Some(BoundMode::Estimate)) {
            lo[i] = jitter(lo[i]);
            hi[i] = jitter(hi[i]);
        }
    }
    NoiseParams::new(mu, repair_pd(&sigma)?, lo, hi)
}

/// The estimators' starting point for an experiment seeded with `seed`.
pub fn initial_params(cfg: &ExperimentConfig, seed: u64) -> Result<NoiseParams> {
    match cfg.init {
        InitSpec::Given => Ok(cfg.noise.clone()),
        InitSpec::Perturbed => perturb(&cfg.noise, cfg.perturbation, &cfg.em.bound_modes, derive_seed(seed, 3)),
    }
}

fn run_method(
    method: Method,
    cfg: &ExperimentConfig,
    data: &Dataset,
    init: &NoiseParams,
) -> Result<std::result::Result<EmTrace, EmAbort>> {
    let model = cfg.model.build()?;
    Ok(match method {
        Method::TgEm => run_em(&model, data, &cfg.em, init),
        Method::KsEm => run_ksem(&model, data, &cfg.em, init),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateFile {
    trace: EmTrace,
    error: Option<String>,
}

/// `<out>` with its extension replaced by `trace.csv`.
pub fn trace_csv_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

/// One row per iterate: `iter`, the flattened parameters, `vk`, `loglik`.
pub fn write_trace_csv<W: Write>(trace: &EmTrace, w: W) -> Result<()> {
    let d = trace.final_beta().dim();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["iter".to_string()];
    header.extend(NoiseParams::flat_names(d));
    header.push("vk".into());
    header.push("loglik".into());
    wr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), fmt_ext);
    for it in &trace.iterations {
        let mut row = vec![it.iter.to_string()];
        row.extend(it.beta.flatten().into_iter().map(fmt_ext));
        row.push(opt(it.vk));
        row.push(opt(it.loglik));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

fn write_estimate(path: &Path, trace: &EmTrace, error: Option<String>) -> Result<()> {
    let file = EstimateFile {
        trace: trace.clone(),
        error,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    write_trace_csv(trace, BufWriter::new(File::create(trace_csv_path(path))?))
}

/// Runs one estimator on a dataset file. The trace is written as JSON to
/// `out` and as CSV next to it, including the partial trace of an aborted run.
pub fn cmd_estimate(cfg: &ExperimentConfig, data_path: &Path, method: Method, out: &Path) -> Result<EmTrace> {
    let file = File::open(data_path).map_err(|e| Error::Config(format!("cannot open {}: {e}", data_path.display())))?;
    let data = Dataset::read_csv(BufReader::new(file), Some(cfg.x1()))?;
    data.check_model(&cfg.model.build()?)?;
    let init = initial_params(cfg, cfg.seed)?;
    match run_method(method, cfg, &data, &init)? {
        Ok(trace) => {
            write_estimate(out, &trace, None)?;
            Ok(trace)
        }
        Err(abort) => {
            write_estimate(out, &abort.trace, Some(abort.error.to_string()))?;
            Err(abort.error)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub ok: bool,
    pub error: Option<String>,
    pub iterations_used: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub filter_degenerate_steps: usize,
    pub feasibility_violations: usize,
    pub final_beta: Option<NoiseParams>,
    pub trace: Option<EmTrace>,
}

impl RunRecord {
    fn failed(method: Method, error: String) -> Self {
        Self {
            method,
            ok: false,
            error: Some(error),
            iterations_used: 0,
            converged: false,
            wall_time_s: 0.0,
            filter_degenerate_steps: 0,
            feasibility_violations: 0,
            final_beta: None,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub param: String,
    pub stats: Option<FiveNumber>,
    pub n_ok: usize,
    pub n_fail: usize,
}

const METHODS: [Method; 2] = [Method::TgEm, Method::KsEm];

/// Config of run `r`: derived seed, derived EM master seed, a single run.
pub fn run_config(cfg: &ExperimentConfig, r: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = derive_seed(cfg.seed, r as u64);
    c.em.master_seed = derive_seed(c.seed, 4);
    c.runs = 1;
    c
}

fn one_run(cfg: &ExperimentConfig, r: usize) -> RunOutcome {
    let c = run_config(cfg, r);
    let prepared = simulate_dataset(&c, c.seed).and_then(|d| Ok((d, initial_params(&c, c.seed)?)));
    let records = match prepared {
        Err(e) => METHODS.iter().map(|&m| RunRecord::failed(m, format!("simulation: {e}"))).collect(),
        Ok((data, init)) => METHODS
            .iter()
            .map(|&method| {
                let t0 = Instant::now();
                let res = run_method(method, &c, &data, &init);
                let wall = t0.elapsed().as_secs_f64();
                match res {
                    Err(e) => RunRecord::failed(method, e.to_string()),
                    Ok(Ok(trace)) => RunRecord {
                        method,
                        ok: true,
                        error: None,
                        iterations_used: trace.iterations_used,
                        converged: trace.converged,
                        wall_time_s: wall,
                        filter_degenerate_steps: trace.total_degenerate_steps(),
                        feasibility_violations: trace.total_feasibility_violations(),
                        final_beta: Some(trace.final_beta().clone()),
                        trace: Some(trace),
                    },
                    Ok(Err(abort)) => RunRecord {
                        iterations_used: abort.trace.iterations_used,
                        wall_time_s: wall,
                        filter_degenerate_steps: abort.trace.total_degenerate_steps(),
                        feasibility_violations: abort.trace.total_feasibility_violations(),
                        trace: Some(abort.trace),
                        ..RunRecord::failed(method, abort.error.to_string())
                    },
                }
            })
            .collect(),
    };
    RunOutcome { run: r, seed: c.seed, records }
}

/// Monte Carlo replication: per run, fresh data, a perturbed start, and both
/// estimators. Writes `run_NNN.json` and `run_NNN.config.json` per run, then
/// `runs.csv` and `summary.csv`.
pub fn cmd_montecarlo(cfg: &ExperimentConfig, out_dir: &Path, jobs: Option<usize>) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RunOutcome>> = pool.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|r| {
                let outcome = one_run(cfg, r);
                run_config(cfg, r).save(&out_dir.join(format!("run_{r:03}.config.json")))?;
                std::fs::write(
                    out_dir.join(format!("run_{r:03}.json")),
                    serde_json::to_string_pretty(&outcome)? + "\n",
                )?;
                Ok(outcome)
            })
            .collect()
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let d = cfg.noise.dim();
    let names = NoiseParams::flat_names(d);
    let mut runs_csv = csv::Writer::from_path(out_dir.join("runs.csv"))?;
    let mut header: Vec<String> = ["run", "seed", "method", "status", "iterations_used", "converged", "filter_degenerate_steps", "feasibility_violations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(names.iter().cloned());
    runs_csv.write_record(&header)?;
    for o in &outcomes {
        for rec in &o.records {
            let mut row = vec![
                o.run.to_string(),
                o.seed.to_string(),
                rec.method.to_string(),
                if rec.ok { "ok" } else { "failed" }.to_string(),
                rec.iterations_used.to_string(),
                rec.converged.to_string(),
                rec.filter_degenerate_steps.to_string(),
                rec.feasibility_violations.to_string(),
            ];
            match (&rec.final_beta, rec.ok) {
                (Some(b), true) => row.extend(b.flatten().into_iter().map(fmt_ext)),
                _ => row.extend(std::iter::repeat_n(String::new(), names.len())),
            }
            runs_csv.write_record(&row)?;
        }
    }
    runs_csv.flush()?;

    let mut rows = Vec::new();
    let mut worst = 0;
    for method in METHODS {
        let recs: Vec<&RunRecord> = outcomes.iter().flat_map(|o| &o.records).filter(|r| r.method == method).collect();
        let ok: Vec<Vec<f64>> = recs
            .iter()
            .filter(|r| r.ok)
            .filter_map(|r| r.final_beta.as_ref().map(|b| b.flatten()))
            .collect();
        let n_fail = recs.len() - ok.len();
        worst = worst.max(n_fail);
        for (k, name) in names.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|v| v[k]).collect();
            rows.push(SummaryRow {
                method,
                param: name.clone(),
                stats: FiveNumber::of(&vals),
                n_ok: ok.len(),
                n_fail,
            });
        }
    }
    let mut summary = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    summary.write_record(["method", "param", "median", "q1", "q3", "min", "max", "n_ok", "n_fail"])?;
    for row in &rows {
        let s = row.stats;
        let f = |g: fn(&FiveNumber) -> f64| s.as_ref().map_or("nan".to_string(), |s| fmt_ext(g(s)));
        summary.write_record([
            row.method.to_string(),
            row.param.clone(),
            f(|s| s.median),
            f(|s| s.q1),
            f(|s| s.q3),
            f(|s| s.min),
            f(|s| s.max),
            row.n_ok.to_string(),
            row.n_fail.to_string(),
        ])?;
    }
    summary.flush()?;

    if worst as f64 > MAX_FAILURE_RATE * cfg.runs as f64 {
        return Err(Error::TooManyFailures {
            failed: worst,
            runs: cfg.runs,
        });
    }
    Ok(rows)
}

/// Mass, unnormalized first and second moments, and the normalized mean and
/// variance of a scalar truncated Gaussian, 12 significant digits.
pub fn cmd_moments(mu: f64, var: f64, a: f64, b: f64) -> Result<String> {
    NoiseParams::scalar(mu, var, a, b)?;
    let m = uni_moments(mu, var, a, b)?;
    let line = |k: &str, v: f64| format!("{k:<10}{v:.11e}\n");
    Ok([
        line("mass", m.mass),
        line("M1", m.raw1),
        line("M2", m.raw2),
        line("mean", m.mean),
        line("variance", m.variance()),
    ]
    .concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_stays_within_rate() {
        let truth = NoiseParams::diagonal(&[-0.3, -0.1], &[1.0, 0.5], &[-1.5, f64::NEG_INFINITY], &[2.5, f64::INFINITY])
            .unwrap();
        let modes = [BoundMode::Fixed(crate::truncnorm::ExtReal(-1.5), crate::truncnorm::ExtReal(2.5)), BoundMode::Infinite];
        for seed in 0..50 {
            let p = perturb(&truth, 0.1, &modes, seed).unwrap();
            for (t, q) in truth.flatten().iter().zip(p.flatten()) {
                if t.is_finite() {
                    assert!((q - t).abs() <= 0.1 * t.abs() + 1e-15);
                } else {
                    assert_eq!(q, *t);
                }
            }
            assert_eq!(p.lower()[0], -1.5);
            assert_eq!(p.sigma()[(0, 1)], 0.0);
        }
    }

    #[test]
    fn estimate_mode_bounds_move() {
        let truth = NoiseParams::scalar(0.0, 1.0, -2.0, 2.0).unwrap();
        let p = perturb(&truth, 0.1, &[BoundMode::Estimate], 3).unwrap();
        assert_ne!(p.lower()[0], -2.0);
        assert!((p.lower()[0] + 2.0).abs() <= 0.2);
    }

    #[test]
    fn moments_report() {
        let r = cmd_moments(0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert!(r.contains("mass      1.00000000000e0"), "{r}");
        assert!(r.contains("variance  1.00000000000e0"));
        assert!(cmd_moments(0.0, 1.0, 1.0, 0.0).is_err());
    }
}
