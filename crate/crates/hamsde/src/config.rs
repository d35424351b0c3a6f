//! Run configuration: a JSON schema for batch experiments.
//!
//! A config names an experiment kind, the objects it runs on (catalog names
//! or DSL strings), grid and sampling parameters, pass tolerances, and the
//! output directory. Unknown keys are rejected, and schema problems are
//! reported with line/column positions so configs stay diffable and
//! checkable. CLI flags can override the sampling knobs after loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The experiment families the runner knows how to orchestrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    /// Integrate sampled paths, measuring per-step and accumulated
    /// symplectic defects.
    #[serde(rename = "simulate")]
    Simulate,
    /// Compare the analytic action differential against common-path finite
    /// differences over noise draws.
    #[serde(rename = "action-check")]
    ActionCheck,
    /// Shoot a Lagrangian section and verify the discrete
    /// Hamilton-Jacobi residual and spatial-derivative agreement.
    #[serde(rename = "hj")]
    Hj,
    /// Monte-Carlo heat-equation construction versus the Crank-Nicolson
    /// reference.
    #[serde(rename = "feynman-kac")]
    FeynmanKac,
    /// Canonical-transform checks: reduction to equilibrium and bracket
    /// conditions.
    #[serde(rename = "transform")]
    Transform,
    /// Residual decay under Brownian-bridge refinement.
    #[serde(rename = "convergence")]
    Convergence,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::ActionCheck => "action-check",
            ExperimentKind::Hj => "hj",
            ExperimentKind::FeynmanKac => "feynman-kac",
            ExperimentKind::Transform => "transform",
            ExperimentKind::Convergence => "convergence",
        }
    }
}

/// Either a catalog name or explicit `h_0..h_r` expression sources.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Name(String),
    Sources(Vec<String>),
}

/// Per-kind pass thresholds; unset fields fall back to documented defaults.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Symplectic-defect bound per step (simulate) or `q1`-independence
    /// bound (transform).
    pub defect: Option<f64>,
    /// Relative agreement bound for derivative comparisons.
    pub rel: Option<f64>,
    /// Absolute bound on the discrete Hamilton-Jacobi residual.
    pub residual: Option<f64>,
    /// Required refinement slope (orders per grid doubling).
    pub slope: Option<f64>,
    /// Bound on mapped-vs-reduced trajectory discrepancy and `Q` drift.
    pub discrepancy: Option<f64>,
    /// Discretization budget added to the statistical band (feynman-kac),
    /// relative to the reference value.
    pub budget: Option<f64>,
    /// Bound on the Poisson-bracket defects (transform).
    pub bracket: Option<f64>,
}

/// One experiment: what to run, on what, at which scale, and how to judge it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    /// Base dimension for DSL sources (catalog entries carry their own).
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// System under test (kinds other than action-check).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    /// Systems swept by action-check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systems: Option<Vec<SystemSpec>>,
    /// Initial section `f`: catalog name or DSL source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<String>,
    /// Potential `V` for feynman-kac (DSL source).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<String>,
    /// Generating function for transform: catalog name or DSL source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generating: Option<String>,
    pub t_end: f64,
    /// Grid steps K.
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Path / draw / seed count, depending on the kind.
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Base-space evaluation points (hj, feynman-kac, convergence).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_points: Option<Vec<f64>>,
    /// Initial phase point, flat `(q, p)` (simulate, action-check,
    /// transform).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<Vec<f64>>,
    /// Refinement doublings for convergence runs.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Mesh spacing of the PDE reference (feynman-kac).
    #[serde(default = "default_pde_dx")]
    pub pde_dx: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub out_dir: PathBuf,
    /// Worker thread count; unset uses the process default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

fn default_dim() -> usize {
    1
}

fn default_paths() -> usize {
    1
}

fn default_levels() -> usize {
    3
}

fn default_pde_dx() -> f64 {
    0.005
}

/// CLI-level overrides applied after a config is loaded.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Parses a JSON config string; schema violations carry line/column.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            message: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { message } => Error::Config {
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(paths) = ov.paths {
            self.paths = paths;
        }
        if let Some(steps) = ov.steps {
            self.steps = steps;
        }
        if let Some(out) = &ov.out {
            self.out_dir = out.clone();
        }
        if let Some(threads) = ov.threads {
            self.threads = Some(threads);
        }
    }

    /// Structural checks beyond JSON shape: positive grid, per-kind
    /// required fields.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::Config { message });
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return fail(format!("t_end must be positive and finite, got {}", self.t_end));
        }
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.paths == 0 {
            return fail("paths must be at least 1".into());
        }
        if self.dim == 0 {
            return fail("dim must be at least 1".into());
        }
        if !(self.pde_dx > 0.0) {
            return fail(format!("pde_dx must be positive, got {}", self.pde_dx));
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return fail("threads must be at least 1".into());
            }
        }
        let need = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    message: format!("kind {:?} requires the {field} field", self.kind.name()),
                })
            }
        };
        match self.kind {
            ExperimentKind::Simulate => {
                need("system", self.system.is_some())?;
                need("z0", self.z0.is_some())?;
            }
            ExperimentKind::ActionCheck => {
                need(
                    "systems (or system)",
                    self.systems.as_ref().is_some_and(|s| !s.is_empty())
                        || self.system.is_some(),
                )?;
                need("z0", self.z0.is_some())?;
            }
            ExperimentKind::Hj | ExperimentKind::Convergence => {
                need("system", self.system.is_some())?;
                need("section", self.section.is_some())?;
                need(
                    "x_points",
                    self.x_points.as_ref().is_some_and(|x| !x.is_empty()),
                )?;
                if self.kind == ExperimentKind::Convergence && self.levels == 0 {
                    return fail("levels must be at least 1 for convergence runs".into());
                }
            }
            ExperimentKind::FeynmanKac => {
                need("potential", self.potential.is_some())?;
                need("section", self.section.is_some())?;
                need(
                    "x_points",
                    self.x_points.as_ref().is_some_and(|x| !x.is_empty()),
                )?;
            }
            ExperimentKind::Transform => {
                need("generating", self.generating.is_some())?;
                need("system", self.system.is_some())?;
            }
        }
        if let Some(z0) = &self.z0 {
            if z0.is_empty() || z0.len() % 2 != 0 {
                return fail(format!(
                    "z0 must hold an even number of coordinates (q then p), got {}",
                    z0.len()
                ));
            }
        }
        Ok(())
    }
}
