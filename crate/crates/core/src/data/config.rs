//! Run configuration, stored as TOML.
//!
//! Every field is optional; absent fields take the defaults below. Relative
//! dataset paths are resolved against the directory holding the config file.
//!
//! ```toml
//! datasets = ["ks_0.6.csv", "ks_2.5.csv"]
//! train_fraction = 1.0
//! equations = ["P1", "P2", "P3", "RA"]
//!
//! [alps]
//! population_size = 200
//! max_layers = 16
//! age_gap = 8
//! aging_scheme = "polynomial"
//! mating_pool_range = 1
//! elites = 1
//! max_generations = 2000
//! crossover_probability = 0.25
//! mutation_probability = 0.1
//! selection_pressure = 5.0
//! seed = 0
//!
//! [tree]
//! max_nodes = 30
//! max_depth = 10
//! param_min = -10.0
//! param_max = 10.0
//! functions = ["add", "mul", "div", "square", "exp", "tanh", "aq"]
//!
//! [integrator]
//! rel_tol = 1e-6
//! abs_tol = 1e-8
//! max_steps = 100000
//!
//! [memetic]
//! max_iterations = 10
//!
//! [output]
//! model = "model.txt"
//! history = "history.csv"
//! report = "report.txt"
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alps::{AlpsConfig, AlpsError};
use crate::expr::{Function, Grammar, TreeLimits};
use crate::genotype::{Variation, TREES};
use crate::ode::{IntegratorSettings, Tolerance, SECTION_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub max_nodes: usize,
    pub max_depth: usize,
    pub param_min: f64,
    pub param_max: f64,
    pub functions: Vec<String>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        let limits = TreeLimits::default();
        TreeConfig {
            max_nodes: limits.max_nodes,
            max_depth: limits.max_depth,
            param_min: -10.0,
            param_max: 10.0,
            functions: Function::ALL
                .iter()
                .map(|f| f.keyword().to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let s = IntegratorSettings::default();
        IntegratorConfig {
            rel_tol: s.tol.rel,
            abs_tol: s.tol.abs,
            max_steps: s.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemeticConfig {
    pub max_iterations: usize,
}

impl Default for MemeticConfig {
    fn default() -> Self {
        MemeticConfig { max_iterations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub model: PathBuf,
    pub history: PathBuf,
    pub report: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            model: "model.txt".into(),
            history: "history.csv".into(),
            report: "report.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<PathBuf>,
    /// Leading share of each trajectory used for fitting.
    pub train_fraction: f64,
    /// Equations that are evolved; the others keep a zero right-hand side.
    pub equations: Vec<String>,
    pub alps: AlpsConfig,
    pub tree: TreeConfig,
    pub integrator: IntegratorConfig,
    pub memetic: MemeticConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            datasets: Vec::new(),
            train_fraction: 1.0,
            equations: SECTION_NAMES.iter().map(|s| s.to_string()).collect(),
            alps: AlpsConfig::default(),
            tree: TreeConfig::default(),
            integrator: IntegratorConfig::default(),
            memetic: MemeticConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid configuration: {0}")]
    Syntax(String),
    #[error("invalid value for `{key}`: {reason}")]
    OutOfRange { key: String, reason: String },
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
}

impl From<AlpsError> for ConfigError {
    fn from(e: AlpsError) -> Self {
        let AlpsError::InvalidConfig { key, reason } = e;
        ConfigError::OutOfRange {
            key: format!("alps.{key}"),
            reason,
        }
    }
}

fn out_of_range(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.alps.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(out_of_range("train_fraction", "must be in (0, 1]"));
        }
        self.active_equations()?;
        if self.tree.max_nodes == 0 {
            return Err(out_of_range("tree.max_nodes", "must be positive"));
        }
        if self.tree.max_depth == 0 {
            return Err(out_of_range("tree.max_depth", "must be positive"));
        }
        if !(self.tree.param_min.is_finite()
            && self.tree.param_max.is_finite()
            && self.tree.param_min <= self.tree.param_max)
        {
            return Err(out_of_range(
                "tree.param_min",
                "range must be finite and ordered",
            ));
        }
        self.functions()?;
        for (key, v) in [
            ("integrator.rel_tol", self.integrator.rel_tol),
            ("integrator.abs_tol", self.integrator.abs_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(out_of_range(key, "must be positive"));
            }
        }
        if self.integrator.max_steps == 0 {
            return Err(out_of_range("integrator.max_steps", "must be positive"));
        }
        Ok(())
    }

    pub fn active_equations(&self) -> Result<[bool; TREES], ConfigError> {
        let mut active = [false; TREES];
        for name in &self.equations {
            let slot = SECTION_NAMES
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| out_of_range("equations", format!("unknown equation `{name}`")))?;
            active[slot] = true;
        }
        if !active.iter().any(|a| *a) {
            return Err(out_of_range(
                "equations",
                "at least one equation is required",
            ));
        }
        Ok(active)
    }

    fn functions(&self) -> Result<Vec<Function>, ConfigError> {
        self.tree
            .functions
            .iter()
            .map(|name| {
                Function::from_keyword(name).ok_or_else(|| {
                    out_of_range("tree.functions", format!("unknown function `{name}`"))
                })
            })
            .collect()
    }

    pub fn variation(&self) -> Result<Variation, ConfigError> {
        Ok(Variation {
            grammar: Grammar {
                functions: self.functions()?,
                param_range: (self.tree.param_min, self.tree.param_max),
                ..Grammar::default()
            },
            limits: TreeLimits {
                max_nodes: self.tree.max_nodes,
                max_depth: self.tree.max_depth,
            },
            crossover_probability: self.alps.crossover_probability,
            mutation_probability: self.alps.mutation_probability,
            active: self.active_equations()?,
        })
    }

    pub fn integrator_settings(&self) -> IntegratorSettings {
        IntegratorSettings {
            tol: Tolerance {
                rel: self.integrator.rel_tol,
                abs: self.integrator.abs_tol,
            },
            max_steps: self.integrator.max_steps,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates config text without touching the file system.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Loads a config file, resolving dataset paths and checking that they exist.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in config.datasets.iter_mut() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
        if !p.exists() {
            return Err(ConfigError::MissingPath(p.clone()));
        }
    }
    Ok(config)
}

pub fn save_config(path: &Path, config: &RunConfig) -> Result<(), ConfigError> {
    fs::write(path, config.to_toml_string()).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}
