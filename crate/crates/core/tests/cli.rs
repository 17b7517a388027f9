use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use tgem::harness::{simulate_dataset, ExperimentConfig};
use tgem::ssm::Dataset;

fn tgem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgem")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tgem(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small affine experiment, cheap enough for end-to-end runs.
fn small_config(dir: &Path, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> PathBuf {
    let mut cfg = ExperimentConfig::builtin("paper_sec6_desk").unwrap();
    cfg.n_samples = 120;
    cfg.runs = 1;
    cfg.em.particles = 40;
    cfg.em.max_iterations = 3;
    cfg.em.mc_samples = 2000;
    edit(&mut cfg);
    let path = dir.join(name);
    cfg.save(&path).unwrap();
    path
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().iter().map(String::from).collect();
    let rows = rd.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn builtin_simulation_keeps_state_noise_in_its_box() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("data.csv");
    let stdout = ok(&["simulate", "--config", "paper_sec6", "--out", p(&out)]);
    assert!(stdout.contains("5000 records"));
    assert!(stdout.contains("min"));
    let (h, rows) = read_rows(&out);
    assert_eq!(rows.len(), 5000);
    let (u, x) = (col(&h, "u1"), col(&h, "x1"));
    let num = |r: &Vec<String>, c: usize| r[c].parse::<f64>().unwrap();
    for t in 0..rows.len() - 1 {
        let w = num(&rows[t + 1], x) - 0.9 * num(&rows[t], x) - 2.0 * num(&rows[t], u);
        assert!((-1.5 - 1e-9..=2.5 + 1e-9).contains(&w), "w_{} = {w}", t + 1);
    }
}

#[test]
fn two_sample_dataset_round_trips_bit_identically() {
    let dir = TempDir::new().unwrap();
    let cfg_path = small_config(dir.path(), "n2.json", |c| c.n_samples = 2);
    let out = dir.path().join("n2.csv");
    ok(&["simulate", "--config", p(&cfg_path), "--out", p(&out)]);
    let text = std::fs::read(&out).unwrap();
    let back = Dataset::read_csv(text.as_slice(), None).unwrap();
    assert_eq!(back.len(), 2);
    let cfg = ExperimentConfig::load(p(&cfg_path)).unwrap();
    let direct = simulate_dataset(&cfg, cfg.seed).unwrap();
    assert_eq!(back.outputs, direct.outputs);
    assert_eq!(back.inputs, direct.inputs);
    assert_eq!(back.x1, direct.x1);
    let mut again = Vec::new();
    back.write_csv(&mut again, true).unwrap();
    assert_eq!(again, text);
}

#[test]
fn simulation_is_seed_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "c.json", |_| {});
    let files: Vec<PathBuf> = ["a.csv", "b.csv", "c.csv"].iter().map(|f| dir.path().join(f)).collect();
    ok(&["simulate", "--config", p(&cfg), "--out", p(&files[0]), "--seed", "7"]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&files[1]), "--seed", "7"]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&files[2]), "--seed", "8"]);
    let read = |f: &PathBuf| std::fs::read(f).unwrap();
    assert_eq!(read(&files[0]), read(&files[1]));
    assert_ne!(read(&files[0]), read(&files[2]));
}

#[test]
fn estimate_writes_one_trace_row_per_iterate() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "c.json", |c| c.em.max_iterations = 5);
    let data = dir.path().join("d.csv");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    for (method, tag) in [("ks", "ks-em"), ("tg", "tg-em")] {
        let out = dir.path().join(format!("{method}.json"));
        let stdout = ok(&["estimate", "--config", p(&cfg), "--data", p(&data), "--method", method, "--out", p(&out)]);
        assert!(stdout.starts_with(tag));
        let file = json(&out);
        assert!(file["error"].is_null());
        let used = file["trace"]["iterations_used"].as_u64().unwrap() as usize;
        let (h, rows) = read_rows(&dir.path().join(format!("{method}.trace.csv")));
        assert_eq!(rows.len(), used + 1);
        let expected = "iter,mu_1,mu_2,sigma_11,sigma_21,sigma_12,sigma_22,a_1,a_2,b_1,b_2,vk,loglik";
        assert_eq!(h.join(","), expected);
        assert_eq!(rows.last().unwrap()[col(&h, "loglik")], "nan");
    }
}

#[test]
fn ksem_parameter_change_shrinks_below_tolerance() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "g.json", |c| {
        c.n_samples = 2000;
        c.noise = tgem::truncnorm::NoiseParams::diagonal(
            &[-0.3, -0.1],
            &[1.0, 0.5],
            &[f64::NEG_INFINITY; 2],
            &[f64::INFINITY; 2],
        )
        .unwrap();
        c.em.bound_modes = vec![tgem::em::BoundMode::Infinite; 2];
        c.em.max_iterations = 40;
        c.em.param_rel_tol = 2e-3;
    });
    let data = dir.path().join("g.csv");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&data)]);
    let out = dir.path().join("ks.json");
    ok(&["estimate", "--config", p(&cfg), "--data", p(&data), "--method", "ks", "--out", p(&out)]);
    let trace = &json(&out)["trace"];
    assert_eq!(trace["converged"], Value::Bool(true));
    assert!(trace["iterations_used"].as_u64().unwrap() < 40);
    let (_, rows) = read_rows(&dir.path().join("ks.trace.csv"));
    let params: Vec<Vec<f64>> = rows.iter().map(|r| r[1..7].iter().map(|s| s.parse().unwrap()).collect()).collect();
    let change: Vec<f64> = params
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    for pair in change.windows(2) {
        assert!(pair[1] <= pair[0], "change grew: {change:?}");
    }
}

#[test]
fn single_run_montecarlo_is_simulate_plus_two_estimates() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "c.json", |_| {});
    let mc = dir.path().join("mc");
    ok(&["montecarlo", "--config", p(&cfg), "--out-dir", p(&mc), "--jobs", "1"]);
    let run_cfg = mc.join("run_000.config.json");
    let record = json(&mc.join("run_000.json"));
    let data = dir.path().join("d.csv");
    ok(&["simulate", "--config", p(&run_cfg), "--out", p(&data)]);
    for (k, method) in ["tg", "ks"].iter().enumerate() {
        let out = dir.path().join(format!("{method}.json"));
        ok(&["estimate", "--config", p(&run_cfg), "--data", p(&data), "--method", method, "--out", p(&out)]);
        let est = json(&out);
        let rec = &record["records"][k];
        assert_eq!(rec["ok"], Value::Bool(true));
        assert_eq!(rec["final_beta"], *est["trace"]["iterations"].as_array().unwrap().last().unwrap().get("beta").unwrap());
        assert_eq!(rec["trace"], est["trace"]);
    }
}

fn type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[test]
fn summary_matches_recomputation_from_runs_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "c.json", |c| {
        c.runs = 5;
        c.em.max_iterations = 2;
    });
    let mc = dir.path().join("mc");
    ok(&["montecarlo", "--config", p(&cfg), "--out-dir", p(&mc)]);
    let (rh, runs) = read_rows(&mc.join("runs.csv"));
    let (sh, summary) = read_rows(&mc.join("summary.csv"));
    assert_eq!(sh.join(","), "method,param,median,q1,q3,min,max,n_ok,n_fail");
    assert_eq!(runs.len(), 10);
    for row in &summary {
        let (method, param) = (&row[0], &row[1]);
        let mut vals: Vec<f64> = runs
            .iter()
            .filter(|r| &r[col(&rh, "method")] == method && r[col(&rh, "status")] == "ok")
            .map(|r| r[col(&rh, param)].parse::<f64>().unwrap())
            .collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(row[7], vals.len().to_string());
        let got = |i: usize| row[i].parse::<f64>().unwrap();
        let expect = [type7(&vals, 0.5), type7(&vals, 0.25), type7(&vals, 0.75), vals[0], vals[vals.len() - 1]];
        for (i, e) in expect.iter().enumerate() {
            let g = got(2 + i);
            assert!(g == *e || (g - e).abs() <= 1e-12 * e.abs().max(1.0), "{method} {param}: {g} vs {e}");
        }
    }
}

#[test]
fn montecarlo_outputs_are_deterministic_across_job_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "c.json", |c| {
        c.runs = 3;
        c.em.max_iterations = 2;
    });
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["montecarlo", "--config", p(&cfg), "--out-dir", p(&a), "--jobs", "1"]);
    ok(&["montecarlo", "--config", p(&cfg), "--out-dir", p(&b), "--jobs", "3"]);
    for f in ["runs.csv", "summary.csv", "run_002.config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| tgem(args).status.code();
    assert_eq!(code(&["moments", "--mu", "0", "--var", "1", "--a", "50", "--b", "51"]), Some(2));
    assert_eq!(code(&["moments", "--mu", "0", "--var", "1", "--a", "1", "--b", "-1"]), Some(1));
    assert_eq!(code(&["moments", "--mu", "0", "--var", "1", "--a", "x", "--b", "1"]), Some(1));
    assert_eq!(code(&["moments", "--mu", "0"]), Some(1));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["simulate", "--config", "/nonexistent/cfg.json", "--out", "/tmp/x.csv"]), Some(1));
}

#[test]
fn malformed_config_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"model\": \"paper_sec6\",\n  \"n_samples\": oops\n}\n").unwrap();
    let out = tgem(&["simulate", "--config", p(&bad), "--out", p(&dir.path().join("o.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

fn moment_values(args: &[&str]) -> Vec<f64> {
    let mut full = vec!["moments"];
    full.extend_from_slice(args);
    ok(&full)
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn moments_report() {
    let v = moment_values(&["--mu", "0", "--var", "1", "--a", "-inf", "--b", "+inf"]);
    assert_eq!(v.len(), 5);
    assert!((v[0] - 1.0).abs() < 1e-15 && v[3].abs() < 1e-15 && (v[4] - 1.0).abs() < 1e-12);

    let v = moment_values(&["--mu", "-0.3", "--var", "1", "--a", "-1.5", "--b", "2.5"]);
    assert!((v[3] + 0.09).abs() < 0.005, "mean {}", v[3]);
    assert!((v[4] - 0.66).abs() < 0.01, "variance {}", v[4]);

    // Composite Simpson on [0, 1], far finer than the 1e-9 target.
    let v = moment_values(&["--mu", "2", "--var", "4", "--a", "0", "--b", "1"]);
    let dens = |x: f64| (-(x - 2.0) * (x - 2.0) / 8.0).exp() / (8.0 * std::f64::consts::PI).sqrt();
    let n = 20_000;
    let h = 1.0 / n as f64;
    let mut q = [0.0; 3];
    for i in 0..=n {
        let x = i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        for (k, qk) in q.iter_mut().enumerate() {
            *qk += w * x.powi(k as i32) * dens(x) * h / 3.0;
        }
    }
    for k in 0..3 {
        assert!((v[k] - q[k]).abs() < 1e-9, "moment {k}: {} vs {}", v[k], q[k]);
    }
}

#[test]
fn shown_config_round_trips() {
    let dir = TempDir::new().unwrap();
    for name in tgem::harness::BUILTINS {
        let text = ok(&["show-config", name]);
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed, ExperimentConfig::builtin(name).unwrap());
        assert_eq!(parsed.to_json().unwrap() + "\n", text);
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, &text).unwrap();
        assert_eq!(ExperimentConfig::load(p(&path)).unwrap(), parsed);
    }
}
