//! Experiment configuration: a TOML file with `[model]`, `[payoff]`,
//! `[grid]`, `[run]`, `[check]` and `[bvp]` sections. Missing keys take the
//! Kuramoto exponential-payoff defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mvis_core::control::BvpOptions;
use mvis_core::exec::Backend;
use mvis_core::models::{ModelSpec, Payoff};
use mvis_core::sim::TimeGrid;
use mvis_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub coupling: f64,
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: "kuramoto".into(), coupling: 1.0, sigma: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PayoffConfig {
    pub kind: String,
    pub a: f64,
    pub b: f64,
}

impl Default for PayoffConfig {
    fn default() -> Self {
        Self { kind: "exp".into(), a: 0.5, b: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub x0: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, n_steps: 50, x0: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmChoice {
    Mc,
    Decoupled,
    Complete,
    All,
}

impl AlgorithmChoice {
    pub fn includes_mc(self) -> bool {
        matches!(self, Self::Mc | Self::All)
    }
    pub fn includes_decoupled(self) -> bool {
        matches!(self, Self::Decoupled | Self::All)
    }
    pub fn includes_complete(self) -> bool {
        matches!(self, Self::Complete | Self::All)
    }
}

impl FromStr for AlgorithmChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Self::Mc),
            "decoupled" => Ok(Self::Decoupled),
            "complete" => Ok(Self::Complete),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected mc, decoupled, complete or all"
            ))),
        }
    }
}

impl fmt::Display for AlgorithmChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mc => "mc",
            Self::Decoupled => "decoupled",
            Self::Complete => "complete",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: AlgorithmChoice,
    /// Particles in the interacting run (and the complete run).
    pub n: usize,
    /// Particles in the decoupled second run; defaults to `n`.
    pub n2: Option<usize>,
    /// Repetitions; above 1 the plain estimator is repeated `m` times.
    pub m: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads, 0 for the rayon default.
    pub threads: usize,
    pub backend: Backend,
    pub dump_paths: bool,
    /// Frozen law to use instead of a fresh interacting run.
    pub law: Option<PathBuf>,
    /// When false, time columns are written as 0 so reports are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmChoice::All,
            n: 1000,
            n2: None,
            m: 1,
            seed: 42,
            out: PathBuf::from("mvis-out"),
            threads: 0,
            backend: Backend::default(),
            dump_paths: false,
            law: None,
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub enabled: bool,
    pub relative_tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { enabled: false, relative_tolerance: 1e-2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub payoff: PayoffConfig,
    pub grid: GridConfig,
    pub run: RunConfig,
    pub check: CheckConfig,
    pub bvp: BvpOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.n < 1 || self.run.m < 1 || self.n2() < 1 {
            return Err(Error::Config("particle and repetition counts must be at least 1".into()));
        }
        self.grid()?;
        self.model()?;
        self.payoff()?;
        if !self.grid.x0.is_finite() {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if !(self.check.relative_tolerance >= 0.0) {
            return Err(Error::Config("check tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n2(&self) -> usize {
        self.run.n2.unwrap_or(self.run.n)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps).map_err(as_config)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::from_key(&self.model.name, self.model.coupling, self.model.sigma).map_err(as_config)
    }

    pub fn payoff(&self) -> Result<Payoff> {
        Payoff::from_key(&self.payoff.kind, self.payoff.a, self.payoff.b).map_err(as_config)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Domain(msg) => Error::Config(msg),
        other => other,
    }
}
