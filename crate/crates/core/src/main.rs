use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use tgem::em::Method;
use tgem::harness::{cmd_estimate, cmd_montecarlo, cmd_moments, cmd_simulate, trace_csv_path, ExperimentConfig, BUILTINS};
use tgem::truncnorm::{fmt_ext, parse_ext};
use tgem::Error;

/// Truncated-Gaussian noise identification for state-space models.
#[derive(Parser)]
#[command(name = "tgem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tg,
    Ks,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as CSV.
    Simulate {
        /// Config file or builtin name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate noise parameters from a dataset CSV.
    Estimate {
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// JSON trace path; the CSV trace goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo replication with both estimators.
    Montecarlo {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Moments of a scalar truncated Gaussian.
    Moments {
        #[arg(long, allow_hyphen_values = true)]
        mu: f64,
        #[arg(long)]
        var: f64,
        #[arg(long, allow_hyphen_values = true, value_parser = ext)]
        a: f64,
        #[arg(long, allow_hyphen_values = true, value_parser = ext)]
        b: f64,
    },
    /// Print a builtin config as JSON.
    ShowConfig {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(BUILTINS))]
        name: String,
    },
}

fn ext(s: &str) -> Result<f64, String> {
    parse_ext(s).ok_or_else(|| format!("expected a number, -inf or +inf, got {s:?}"))
}

fn run(cmd: Command) -> tgem::Result<()> {
    match cmd {
        Command::Simulate { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (data, report) = cmd_simulate(&cfg, &out, seed)?;
            println!("wrote {} records to {}", data.len(), out.display());
            print!("{report}");
        }
        Command::Estimate { config, data, method, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let method = match method {
                MethodArg::Tg => Method::TgEm,
                MethodArg::Ks => Method::KsEm,
            };
            let trace = cmd_estimate(&cfg, &data, method, &out)?;
            let beta = trace.final_beta();
            println!(
                "{method}: {} iteration(s), converged {}; trace in {} and {}",
                trace.iterations_used,
                trace.converged,
                out.display(),
                trace_csv_path(&out).display()
            );
            println!("mu    {}", beta.mu().iter().map(|v| fmt_ext(*v)).collect::<Vec<_>>().join(" "));
            println!("diag  {}", beta.sigma().diagonal().iter().map(|v| fmt_ext(*v)).collect::<Vec<_>>().join(" "));
        }
        Command::Montecarlo { config, out_dir, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = cmd_montecarlo(&cfg, &out_dir, jobs)?;
            println!("{:<7} {:<10} {:>12} {:>12} {:>12}", "method", "param", "median", "q1", "q3");
            for r in rows.iter().filter(|r| r.param.starts_with("mu") || r.param.starts_with("sigma")) {
                if let Some(s) = r.stats {
                    println!("{:<7} {:<10} {:>12.5} {:>12.5} {:>12.5}", r.method, r.param, s.median, s.q1, s.q3);
                }
            }
            println!("results in {}", out_dir.display());
        }
        Command::Moments { mu, var, a, b } => print!("{}", cmd_moments(mu, var, a, b)?),
        Command::ShowConfig { name } => {
            let cfg = ExperimentConfig::builtin(&name).ok_or_else(|| Error::Config(format!("unknown builtin {name}")))?;
            println!("{}", cfg.to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
