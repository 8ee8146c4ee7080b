use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CovarianceSpec;
use crate::grid::{BoundaryExtension, GridHierarchy};
use crate::mlmc::EstimatorConfig;
use crate::optim::OptimizerConfig;
use crate::pde::{FieldSpec, LinearSolver, ProblemSpec, Reaction};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MLMC_OUT_DIR";

/// Problem data in flat form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub n_kl: usize,
    pub m0: usize,
    pub max_level: usize,
    pub dim: usize,
    pub reaction: Reaction,
    pub boundary: BoundaryExtension,
    pub solver: LinearSolver,
    pub target: FieldSpec,
    pub control_mask: FieldSpec,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            alpha: 1e-6,
            gamma: 1.0,
            sigma2: 0.1,
            lambda: 0.3,
            n_kl: 500,
            m0: 8,
            max_level: 5,
            dim: 2,
            reaction: Reaction::None,
            boundary: BoundaryExtension::ZeroDirichlet,
            solver: LinearSolver::Cholesky,
            target: FieldSpec::Box {
                lo: 0.25,
                hi: 0.75,
                value: 1.0,
            },
            control_mask: FieldSpec::Constant { value: 1.0 },
        }
    }
}

impl ProblemConfig {
    pub fn to_spec(&self) -> Result<ProblemSpec> {
        let spec = ProblemSpec {
            alpha: self.alpha,
            gamma: self.gamma,
            target: self.target,
            control_mask: self.control_mask,
            reaction: self.reaction,
            covariance: CovarianceSpec {
                sigma2: self.sigma2,
                lambda: self.lambda,
                dim: self.dim,
                n_kl: self.n_kl,
            },
            hierarchy: GridHierarchy::with_boundary(self.m0, self.max_level, self.dim, self.boundary)?,
            solver: self.solver,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ncg,
    Newton,
    Both,
}

impl Method {
    pub fn runs(self) -> &'static [Method] {
        match self {
            Method::Ncg => &[Method::Ncg],
            Method::Newton => &[Method::Newton],
            Method::Both => &[Method::Ncg, Method::Newton],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ncg => "ncg",
            Method::Newton => "newton",
            Method::Both => "both",
        }
    }
}

/// Everything that determines an experiment's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub preset: Option<String>,
    pub method: Method,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// RMSE of the post-hoc `E[y]` and `Var[y]` estimates; zero skips them.
    pub post_eps: f64,
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    pub estimator: EstimatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "custom".into(),
            preset: None,
            method: Method::Ncg,
            seed: 1,
            out_dir: None,
            post_eps: 1e-2,
            problem: ProblemConfig::default(),
            optimizer: OptimizerConfig {
                tau: 1e-4,
                ..Default::default()
            },
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 6] = [
    "problem1",
    "problem2",
    "problem3",
    "problem1-desk",
    "problem2-desk",
    "problem3-desk",
];

/// Paper-scale presets use five refinements (`m = 8 .. 256`); the desk
/// variants stop at `m = 64` and relax `tau` tenfold.
pub fn preset(name: &str) -> Result<RunConfig> {
    let (base, desk) = match name.strip_suffix("-desk") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let mut c = RunConfig {
        name: name.to_string(),
        preset: Some(name.to_string()),
        method: Method::Both,
        ..Default::default()
    };
    let p = &mut c.problem;
    match base {
        "problem1" => {
            p.alpha = 1e-6;
            p.gamma = 1.0;
            p.sigma2 = 0.1;
            c.optimizer.tau = 1e-4;
        }
        "problem2" => {
            p.alpha = 1e-5;
            p.gamma = 0.0;
            p.sigma2 = 0.5;
            c.optimizer.tau = 1e-4;
        }
        "problem3" => {
            p.alpha = 1e-5;
            p.gamma = 1.0;
            p.sigma2 = 0.5;
            p.reaction = Reaction::ExpShift { shift: 20.0, rate: 5.0 };
            c.optimizer.tau = 5e-5;
        }
        _ => {
            return Err(Error::Config {
                key: "preset".into(),
                reason: format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", ")),
            })
        }
    }
    if desk {
        c.problem.max_level = 3;
        c.optimizer.tau *= 10.0;
    }
    Ok(c)
}

/// Whether a preset runs on the paper's finest grid.
pub fn is_full_scale(name: &str) -> bool {
    PRESETS.contains(&name) && !name.ends_with("-desk")
}

/// Command-line values applied after the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub tau: Option<f64>,
    pub method: Option<Method>,
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("unknown variant"))
        .unwrap_or("config")
        .to_string();
    Error::Config {
        key,
        reason: msg.trim().to_string(),
    }
}

/// Resolves defaults, then the preset, then the TOML file, then `flags`.
/// A `preset` key inside the file is honoured when no preset is passed.
pub fn parse_config(preset_name: Option<&str>, file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let file_table: Option<toml::Table> = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(text.parse::<toml::Table>().map_err(config_error)?)
        }
        None => None,
    };
    let file_preset = file_table
        .as_ref()
        .and_then(|t| t.get("preset"))
        .and_then(|v| v.as_str())
        .map(str::to_string);
    let base = match preset_name.map(str::to_string).or(file_preset) {
        Some(name) => preset(&name)?,
        None => RunConfig::default(),
    };
    let mut cfg = match file_table {
        Some(t) => {
            let mut table = toml::Table::try_from(&base).map_err(config_error)?;
            merge(&mut table, t);
            table.try_into::<RunConfig>().map_err(config_error)?
        }
        None => base,
    };
    if let Some(name) = preset_name {
        cfg.preset = Some(name.to_string());
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out_dir {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(t) = flags.tau {
        cfg.optimizer.tau = t;
    }
    if let Some(m) = flags.method {
        cfg.method = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, e: Error| match e {
            Error::InvalidParameter { name, reason } => Error::Config {
                key: format!("{key}.{name}"),
                reason,
            },
            other => other,
        };
        self.problem.to_spec().map_err(|e| wrap("problem", e))?;
        self.optimizer.validate().map_err(|e| wrap("optimizer", e))?;
        self.estimator.validate().map_err(|e| wrap("estimator", e))?;
        if !(self.post_eps >= 0.0 && self.post_eps.is_finite()) {
            return Err(Error::Config {
                key: "post_eps".into(),
                reason: "must be nonnegative".into(),
            });
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config {
                key: "name".into(),
                reason: "must be a plain, non-empty file name".into(),
            });
        }
        Ok(())
    }

    /// Output directory: the configured one, else `$MLMC_OUT_DIR`, else
    /// `mlmc-out`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mlmc-out"))
    }

    /// Directory holding this run's files; it carries the master seed.
    pub fn run_dir(&self) -> PathBuf {
        self.resolved_out_dir().join(format!("{}-seed{}", self.name, self.seed))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }
}
