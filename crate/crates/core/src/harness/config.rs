use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{BoundMode, CovStructure, EmConfig};
use crate::error::{Error, Result};
use crate::ssm::{AffineSpec, StateSpaceModel};
use crate::truncnorm::{ExtReal, NoiseParams};

pub const BUILTINS: [&str; 3] = ["paper_sec6", "paper_sec6_desk", "paper_sec6_full"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMatrices {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

/// A named builtin model or explicit affine matrices (row-major rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Named(String),
    Affine { affine: AffineMatrices },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSpec {
    /// I.i.d. standard normal, seeded from the experiment seed.
    Gaussian,
    /// CSV file with `u1..um` columns (or all columns when none are so named).
    Csv(PathBuf),
}

/// Starting point handed to the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSpec {
    /// `noise` with every mean/covariance component moved uniformly within
    /// `perturbation * |value|`; bounds move only in estimate mode.
    Perturbed,
    /// `noise` as given.
    Given,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// True parameters for simulation; also the centre of the initial guess.
    pub noise: NoiseParams,
    pub x1: Vec<f64>,
    pub n_samples: usize,
    #[serde(default = "default_inputs")]
    pub inputs: InputSpec,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default = "default_init")]
    pub init: InitSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_inputs() -> InputSpec {
    InputSpec::Gaussian
}

fn default_runs() -> usize {
    1
}

fn default_perturbation() -> f64 {
    0.10
}

fn default_init() -> InitSpec {
    InitSpec::Perturbed
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("matrix {what} has ragged rows")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl ModelSpec {
    pub fn build(&self) -> Result<StateSpaceModel> {
        match self {
            ModelSpec::Named(name) if name == "paper_sec6" => Ok(StateSpaceModel::paper_sec6()),
            ModelSpec::Named(name) => Err(Error::Config(format!("unknown model {name:?}"))),
            ModelSpec::Affine { affine } => StateSpaceModel::from_affine(AffineSpec {
                a: matrix(&affine.a, "a")?,
                b: matrix(&affine.b, "b")?,
                c: matrix(&affine.c, "c")?,
                d: matrix(&affine.d, "d")?,
            }),
        }
    }
}

impl ExperimentConfig {
    /// Builtin configs: the simulation study at full scale and a reduced
    /// desk-scale version.
    pub fn builtin(name: &str) -> Option<Self> {
        let (runs, n, particles, iters) = match name {
            "paper_sec6" | "paper_sec6_full" => (100, 5000, 500, 40),
            "paper_sec6_desk" => (20, 2000, 300, 25),
            _ => return None,
        };
        let noise = NoiseParams::diagonal(
            &[-0.3, -0.1],
            &[1.0, 0.5],
            &[-1.5, f64::NEG_INFINITY],
            &[2.5, f64::INFINITY],
        )
        .expect("static parameters");
        Some(Self {
            model: ModelSpec::Named("paper_sec6".into()),
            noise,
            x1: vec![0.0],
            n_samples: n,
            inputs: InputSpec::Gaussian,
            em: EmConfig {
                max_iterations: iters,
                particles,
                bound_modes: vec![BoundMode::Fixed(ExtReal(-1.5), ExtReal(2.5)), BoundMode::Infinite],
                covariance: CovStructure::BlockDiagonal,
                ..EmConfig::default()
            },
            runs,
            perturbation: 0.10,
            init: InitSpec::Perturbed,
            seed: 20240601,
        })
    }

    /// A builtin name or a path to a JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(c) = Self::builtin(spec) {
            return Ok(c);
        }
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Error::Config(format!("cannot read config {spec}: {e}")))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{spec}: {e}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return Err(Error::Config("perturbation must lie in [0, 1)".into()));
        }
        self.em.validate()?;
        let model = self.model.build()?;
        if self.noise.dim() != model.noise_dim() {
            return Err(Error::Config(format!(
                "noise has dimension {}, model needs {}",
                self.noise.dim(),
                model.noise_dim()
            )));
        }
        if self.x1.len() != model.n() {
            return Err(Error::Config(format!("x1 has length {}, model state has {}", self.x1.len(), model.n())));
        }
        if !self.em.bound_modes.is_empty() && self.em.bound_modes.len() != model.noise_dim() {
            return Err(Error::Config(format!(
                "em.bound_modes has {} entries, noise has {} coordinates",
                self.em.bound_modes.len(),
                model.noise_dim()
            )));
        }
        Ok(())
    }

    pub fn x1(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x1)
    }
}
